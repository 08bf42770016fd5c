#!/usr/bin/env python
# Copyright (c) 2024, gscutils authors
# SPDX-License-Identifier: Apache-2.0

from typing import *


class GscError(Exception):
	"""Base class for everything the toolkit raises on bad input."""
	pass


class PreconditionError(GscError, ValueError):
	pass


class ValidationError(GscError):
	def __init__(self, violations: list[str]):
		self.violations = violations
		head = "; ".join(violations[:5])
		more = f" (and {len(violations) - 5} more)" if len(violations) > 5 else ""
		super().__init__(f"{len(violations)} validation error(s): {head}{more}")


class InsufficientCalibrationData(GscError):
	pass


class MissingHead(GscError):
	pass


class MissingFeatures(GscError):
	pass


class DegenerateSpectrum(GscError):
	pass


class ZeroVariance(GscError):
	pass


class EmptyReference(GscError):
	pass


class EmptyPrefix(GscError):
	pass


class InfeasibleTarget(GscError):
	pass


class DegenerateClasses(GscError):
	pass


class MissingShiftLabel(GscError):
	pass


class TiedTopLogits(GscError):
	pass


class ConfigError(GscError):
	pass


class ManifestError(GscError):
	def __init__(self, problems: list[str]):
		self.problems = problems
		super().__init__("; ".join(problems))


class ShapeMismatch(GscError):
	pass


class FormatError(GscError):
	def __init__(self, path: str, reason: str, *, line: Optional[int] = None, offset: Optional[int] = None):
		self.path = path
		self.reason = reason
		self.line = line
		self.offset = offset

		where = ""
		if line is not None:
			where = f" (line {line})"
		elif offset is not None:
			where = f" (byte {offset})"

		super().__init__(f"{path}{where}: {reason}")
