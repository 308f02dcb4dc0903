"""The trainable bundle: state geometry, velocity field, teacher, optional projector."""

from __future__ import annotations

from dataclasses import dataclass

from . import integrator
from .config import RunConfig
from .field import VelocityField
from .state import LearnedProjector, StateSpec, down_state
from .teacher import Teacher
from .tensor import Parameter, Tensor


@dataclass
class RacModel:
    config: RunConfig
    field: VelocityField
    teacher: Teacher
    projector: LearnedProjector | None = None

    @classmethod
    def build(cls, config: RunConfig, teacher: Teacher | None = None) -> "RacModel":
        spec = config.state
        field = VelocityField(spec, config.field, seed=config.seed_for("field"))
        if teacher is None:
            teacher = Teacher(spec, config.teacher, seed=config.seed_for("teacher"))
        projector = LearnedProjector(spec) if config.train.down_mode == "learned" else None
        return cls(config, field, teacher, projector)

    @property
    def spec(self) -> StateSpec:
        return self.config.state

    def trainable(self) -> list[Parameter]:
        params = self.field.parameters()
        if self.projector is not None:
            params += self.projector.parameters()
        return params

    def parameters(self) -> list[Parameter]:
        """Every parameter, grouped as field, projector, teacher."""
        return self.trainable() + self.teacher.parameters()

    def down(self, s: Tensor) -> Tensor:
        return down_state(s, self.spec, self.config.train.down_mode, self.projector)

    def decode(self, z: Tensor, steps: int | None = None):
        return integrator.decode(self.field, z, self.spec, steps or self.config.train.K)

    def encode(self, x: Tensor, steps: int | None = None):
        return integrator.encode(self.field, x, self.spec, steps or self.config.train.K,
                                 self.config.train.down_mode, self.projector)
