from trust import pipeline

from ._base import StageCommand


class Command(StageCommand):
    help = 'Computes saliency maps of every classifier on the positive test images'
    stage = staticmethod(pipeline.maps)
