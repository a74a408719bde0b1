import os

# pygame only rasterizes off-screen surfaces here; keep its banner quiet
os.environ.setdefault("PYGAME_HIDE_SUPPORT_PROMPT", "1")
