# -*- coding: utf-8 -*-
"""
CrossSeg — Module errors
Objectif: Hiérarchie d'exceptions partagée + codes de sortie de la CLI.
"""
from __future__ import annotations


class CrossSegError(Exception):
    """Racine de toutes les erreurs levées par le moteur."""

    exit_code = 1


class ShapeError(CrossSegError, ValueError):
    """Entrée rejetée : forme, rang, nombre de canaux ou valeur hors domaine."""

    exit_code = 3


class ConfigError(CrossSegError):
    """Configuration invalide ou incohérente (clé inconnue, valeur hors bornes)."""

    exit_code = 2


class DataError(CrossSegError):
    """Jeu de données absent/corrompu, labels manquants, couple checkpoint/données incohérent."""

    exit_code = 3


class CheckpointError(DataError):
    """Fichier de checkpoint illisible (magic, version, troncature) ou introuvable."""


class TrainingError(CrossSegError):
    """Enchaînement d'entraînement impossible (variante inadaptée, étape manquante)."""

    exit_code = 3


class NumericError(CrossSegError):
    """Perte non finie détectée ; `step` indique l'itération fautive."""

    exit_code = 4

    def __init__(self, message: str, step: int) -> None:
        super().__init__(f"{message} (step={step})")
        self.step = step
