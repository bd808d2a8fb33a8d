# Add here module name of attention initialization strategies to be included
__all__ = [
    'gt',
    'top1',
    'threshold',
    ]
