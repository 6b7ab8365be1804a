from trust import pipeline

from ._base import StageCommand


class Command(StageCommand):
    help = 'Generates the synthetic dataset (or imports one) into <out>/data'
    stage = staticmethod(pipeline.gen_data)

    def summary(self, config, out, result):
        counts = ', '.join(
            f'{name} {c["positive"]}+/{c["negative"]}-' for name, c in result.manifest.counts.items()
        )
        return f'Dataset written to {out / pipeline.DATA_DIR} ({counts})'
