from trust import pipeline
from trust.report import render_text

from ._base import StageCommand


class Command(StageCommand):
    help = 'Runs the four trust tests over the stored artifacts and writes the report'
    stage = staticmethod(pipeline.report)

    def summary(self, config, out, result):
        return render_text(result.to_dict())
