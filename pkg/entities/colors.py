#!/usr/bin/env python

from enum import Enum

from entities.concepts import Timbre

class TimbreColor(Enum):
    """
    Defines the on-screen colour of each timbre, so that what a source looks
    like carries the same concept as what it sounds like.
    """
    SINE = (230, 80, 60)
    SQUARE = (60, 200, 90)
    SAWTOOTH = (70, 110, 235)

    @classmethod
    def of(cls, timbre:Timbre) -> tuple:
        return cls[timbre.name].value

# Mask surfaces are drawn in white on black
MASK_ON = (255, 255, 255)
MASK_OFF = (0, 0, 0)
