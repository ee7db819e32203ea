"""heatprobe: numerical laboratory for detecting a moving inclusion in a
heat-conducting body from boundary data, by probing with concentrated
special solutions and reading indicator decay rates."""

__version__ = "0.1.0"
