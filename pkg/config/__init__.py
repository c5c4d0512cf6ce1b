from config.config_loader import Config

# Shared instance
config = Config()
