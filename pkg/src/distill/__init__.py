"""
Distill Module

Toy trajectory distribution matching: schedules, analytic teachers, the
refit fake score, few-step students and the training loop.
"""

from .schedule import Schedule
from .scores import GaussianTeacher, MixtureTeacher, parse_teacher, train_fake_score
from .student import AffineStudent, AttnStudent, build_student
from .tdm import DistillConfig, DistillResult, distill, tdm_gradient

__all__ = [
    'Schedule',
    'GaussianTeacher',
    'MixtureTeacher',
    'parse_teacher',
    'train_fake_score',
    'AffineStudent',
    'AttnStudent',
    'build_student',
    'DistillConfig',
    'DistillResult',
    'distill',
    'tdm_gradient',
]
