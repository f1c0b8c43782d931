__all__ = [
    "cli",
    "config",
    "detector",
    "evaluation",
    "model",
    "ops",
    "phantom",
    "trainer",
]
