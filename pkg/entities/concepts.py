#!/usr/bin/env python

from enum import Enum

class ShapeClass(Enum):
    """
    Defines the shapes a synthetic sound source can take on screen.
    """
    CIRCLE = "circle"
    SQUARE = "square"
    TRIANGLE = "triangle"
    BAR = "bar"

class Timbre(Enum):
    """
    Defines the waveform families a synthetic sound source can emit.
    """
    SINE = "sine"
    SQUARE = "square"
    SAWTOOTH = "sawtooth"

SHAPES = list(ShapeClass)
TIMBRES = list(Timbre)

# 4 shapes x 3 timbres, label 0 is the background
NUM_CONCEPTS = len(SHAPES) * len(TIMBRES)
NUM_CLASSES = NUM_CONCEPTS + 1

def concept_label(shape:ShapeClass, timbre:Timbre) -> int:
    """
    Integer class label of a (shape, timbre) concept.

    Parameters:
    - shape: ShapeClass of the source
    - timbre: Timbre of the source

    Returns:
    - int in [1, NUM_CONCEPTS]
    """
    return 1 + SHAPES.index(shape) * len(TIMBRES) + TIMBRES.index(timbre)

def concept_name(label:int) -> str:
    if label == 0:
        return "background"
    shape = SHAPES[(label - 1) // len(TIMBRES)]
    timbre = TIMBRES[(label - 1) % len(TIMBRES)]
    return f"{timbre.value}_{shape.value}"

CONCEPT_NAMES = [concept_name(label) for label in range(1, NUM_CLASSES)]
