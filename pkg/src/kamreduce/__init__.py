"""Constructive KAM reduction of quasi-periodic linear cocycles."""
