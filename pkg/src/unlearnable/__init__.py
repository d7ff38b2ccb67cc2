"""Class-wise data poisons and the orthogonal projection attack that undoes them."""

__version__ = "0.1.0"
