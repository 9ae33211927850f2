"""UAV data-collection lab: WPT/IoT simulator, numpy DDPG/TD3, and LLM reward design."""

__version__ = "0.1.0"
