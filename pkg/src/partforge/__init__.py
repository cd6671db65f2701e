"""partforge: learned complementary-component suggestion for 3D part assembly."""

__version__ = "0.1.0"
