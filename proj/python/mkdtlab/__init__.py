"""Desk-scale laboratory for dataset distillation on self-supervised teachers.

The heavy lifting lives in the compiled ``_mkdtlab`` extension; this package
re-exports its surface. The pipeline verbs mirror the ``mkdt`` command-line
tool: ``generate_data`` -> ``train_teacher`` -> ``teacher_reps`` ->
``train_experts`` -> ``select_high_loss`` -> ``distill`` -> ``pretrain`` ->
``probe``, with the loss and variance primitives available alongside.
"""

try:
    # Installed-wheel layout: the extension sits inside the package.
    from ._mkdtlab import *  # noqa: F401,F403
    from ._mkdtlab import __doc__ as _doc
except ImportError:
    # Development layout: the extension sits next to the package on sys.path.
    from _mkdtlab import *  # noqa: F401,F403
    from _mkdtlab import __doc__ as _doc

__doc__ = _doc or __doc__
__version__ = "0.1.0"
