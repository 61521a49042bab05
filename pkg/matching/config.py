"""
Runtime settings for the dispatch-matching toolkit.

Values come from the environment (optionally a local .env file) so capacity
bounds and defaults can be tuned without touching code.
"""
import logging
import os

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field

logger = logging.getLogger(__name__)

# Load environment variables before the settings singleton is built
load_dotenv()

ENV_PREFIX = "DISPATCH_"


class Settings(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_scaled_supply: int = Field(default=10**8, description="Upper bound on n*D, the total supply of the scaled transportation problem.")
    exact_dp_max_n: int = Field(default=20, description="Largest n accepted by the bitmask DP over availability sets.")
    rational_dp_max_n: int = Field(default=10, description="Largest n accepted by the exact rational DP.")
    opt_enum_max_vectors: int = Field(default=10**6, description="Largest number of arrival-count vectors enumerated for E[OPT].")
    default_trials: int = Field(default=100_000, description="Monte Carlo replications used when none are given.")
    default_seed: int = Field(default=0, description="Master seed used when none is given.")
    block_size: int = Field(default=1024, description="Replications per RNG block; fixes the stream layout independently of --jobs.")
    log_level: str = Field(default="WARNING", description="Root log level configured by the CLI.")
    lemma_set_max_n: int = Field(default=12, description="Largest n for which assignment uniformity is conditioned on the exact available set.")
    min_group_count: int = Field(default=200, description="Minimum observations for a conditional frequency cell to be tested.")

    @classmethod
    def from_env(cls) -> "Settings":
        """
        Builds settings from DISPATCH_* environment variables.

        Returns:
            A frozen Settings instance; unset variables keep their defaults.
        """
        values = {}
        for name in cls.model_fields:
            raw = os.environ.get(f"{ENV_PREFIX}{name.upper()}")
            if raw is not None:
                values[name] = raw
        if values:
            logger.debug(f"Settings overridden from environment: {sorted(values)}")
        return cls(**values)


settings = Settings.from_env()
