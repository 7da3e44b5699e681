"""Asynchronous temporal attention models for multitask survival prediction."""

__version__ = "0.1.0"
