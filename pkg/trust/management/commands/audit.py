from trust import pipeline
from trust.report import render_text

from ._base import StageCommand


class Command(StageCommand):
    help = 'Runs gen-data, train, maps and report end to end'
    stage = staticmethod(pipeline.audit)

    def summary(self, config, out, result):
        return render_text(result.to_dict())
