from trust import pipeline

from ._base import StageCommand


class Command(StageCommand):
    help = 'Trains both ARCH_A replicates, ARCH_B and both segmenter replicates'
    stage = staticmethod(pipeline.train)

    def summary(self, config, out, result):
        lines = [f'Models written to {out / pipeline.MODELS_DIR}']
        for name, model in result.items():
            best = model.auc_history[model.best_epoch - 1] if model.best_epoch else float('nan')
            lines.append(f'  {name}: best epoch {model.best_epoch}/{model.stopped_epoch}, val AUC {best:.3f}')
        return '\n'.join(lines)
