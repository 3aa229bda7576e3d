"""
Metric primitives, GLUE/AVG aggregation and the pfs-days compute heuristic.

Primitives return values on their natural scale ([0, 1] or [-1, 1]);
aggregation and reports work in percentage points.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import pearsonr, spearmanr
from sklearn.metrics import (
    accuracy_score,
    f1_score,
    matthews_corrcoef,
    precision_score,
    recall_score,
    roc_auc_score,
)

from rtdforge.exceptions import AggregationError, DataError, DegenerateMetricError

logger = logging.getLogger('rtdforge')

WNLI_MAJORITY_ACCURACY = 56.34
DEFAULT_UTILIZATION = 0.33

GLUE_TASK_METRICS = {
    'cola': ('mcc',),
    'sst2': ('accuracy',),
    'mrpc': ('f1', 'accuracy'),
    'stsb': ('pearson', 'spearman'),
    'qqp': ('f1', 'accuracy'),
    'mnli': ('accuracy',),
    'qnli': ('accuracy',),
    'rte': ('accuracy',),
    'wnli': ('accuracy',),
}

# Columns of the published results table.
HEADLINE_METRICS = {
    'cola': 'mcc',
    'sst2': 'accuracy',
    'mrpc': 'accuracy',
    'stsb': 'spearman',
    'qqp': 'accuracy',
    'mnli': 'accuracy',
    'qnli': 'accuracy',
    'rte': 'accuracy',
}


@dataclass(frozen=True)
class MetricValue:
    name: str
    value: float
    higher_is_better: bool = True
    degenerate: bool = False

    def __float__(self):
        return self.value


def _as_arrays(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"Length mismatch: {preds.shape[0] if preds.ndim else 0} predictions vs "
                         f"{labels.shape[0] if labels.ndim else 0} labels")
    if preds.size == 0:
        raise ValueError("Metrics need at least one prediction")
    return preds, labels


def matthews_corr(preds, labels) -> MetricValue:
    """MCC; a zero denominator (constant predictions or labels) yields 0 flagged degenerate."""
    preds, labels = _as_arrays(preds, labels)
    degenerate = np.unique(preds).size < 2 or np.unique(labels).size < 2
    value = 0.0 if degenerate else float(matthews_corrcoef(labels, preds))
    if degenerate:
        logger.warning("MCC denominator is zero; reporting 0")
    return MetricValue('mcc', value, degenerate=degenerate)


def accuracy(preds, labels) -> MetricValue:
    preds, labels = _as_arrays(preds, labels)
    return MetricValue('accuracy', float(accuracy_score(labels, preds)))


def f1_binary(preds, labels) -> MetricValue:
    """F1 of the positive class; no predicted and no actual positives gives 1.0."""
    preds, labels = _as_arrays(preds, labels)
    return MetricValue('f1', float(f1_score(labels, preds, labels=[0, 1], pos_label=1, zero_division=1.0)))


def _constant(values: np.ndarray) -> bool:
    return bool(np.ptp(values) == 0)


def pearson_corr(a, b) -> MetricValue:
    a, b = _as_arrays(a, b)
    if a.size < 2 or _constant(a) or _constant(b):
        logger.warning("Pearson correlation of constant input; reporting 0")
        return MetricValue('pearson', 0.0, degenerate=True)
    return MetricValue('pearson', float(pearsonr(a.astype(float), b.astype(float))[0]))


def spearman_corr(a, b) -> MetricValue:
    """Pearson correlation of average-rank vectors."""
    a, b = _as_arrays(a, b)
    if a.size < 2 or _constant(a) or _constant(b):
        logger.warning("Spearman correlation of constant input; reporting 0")
        return MetricValue('spearman', 0.0, degenerate=True)
    return MetricValue('spearman', float(spearmanr(a, b)[0]))


def roc_auc(scores, labels) -> MetricValue:
    scores, labels = _as_arrays(scores, labels)
    if np.unique(labels).size < 2:
        raise DegenerateMetricError("degenerate AUC: labels contain a single class")
    return MetricValue('auc', float(roc_auc_score(labels, scores)))


def roc_auc_or_nan(scores, labels) -> float:
    try:
        return roc_auc(scores, labels).value
    except DegenerateMetricError:
        return float('nan')


def precision_recall(preds, labels) -> tuple[float, float]:
    """Precision and recall of the positive class, 0 where undefined."""
    preds, labels = _as_arrays(preds, labels)
    return (
        float(precision_score(labels, preds, labels=[0, 1], zero_division=0.0)),
        float(recall_score(labels, preds, labels=[0, 1], zero_division=0.0)),
    )


METRIC_FUNCTIONS = {
    'mcc': matthews_corr,
    'accuracy': accuracy,
    'f1': f1_binary,
    'pearson': pearson_corr,
    'spearman': spearman_corr,
}


def compute_task_metrics(names, preds, labels) -> dict[str, MetricValue]:
    unknown = [name for name in names if name not in METRIC_FUNCTIONS]
    if unknown:
        raise ValueError(f"Unknown metrics {unknown}; available: {sorted(METRIC_FUNCTIONS)}")
    return {name: METRIC_FUNCTIONS[name](preds, labels) for name in names}


@dataclass(frozen=True)
class AggregationSpec:
    """
    ``avg`` averages one headline metric per task (``headline`` recipe) or
    per-task metric means (``task-score`` recipe); ``glue`` averages nine
    task scores with WNLI fixed at its majority-class accuracy.
    """
    task_metrics: dict[str, tuple[str, ...]] = field(default_factory=lambda: dict(GLUE_TASK_METRICS))
    headline: dict[str, str] = field(default_factory=lambda: dict(HEADLINE_METRICS))
    wnli_value: float = WNLI_MAJORITY_ACCURACY
    mode: str = 'glue'
    avg_recipe: str = 'headline'

    def __post_init__(self):
        if self.mode not in ('avg', 'glue'):
            raise ValueError(f"Aggregation mode must be 'avg' or 'glue', got {self.mode!r}")
        if self.avg_recipe not in ('headline', 'task-score'):
            raise ValueError(f"AVG recipe must be 'headline' or 'task-score', got {self.avg_recipe!r}")


def _require(results: dict[str, dict[str, float]], task: str, metric: str) -> float:
    try:
        return float(results[task][metric])
    except KeyError:
        raise AggregationError(f"Missing metric '{metric}' for task '{task}'") from None


def task_score(results: dict[str, dict[str, float]], task: str, spec: AggregationSpec) -> float:
    """Unweighted mean of the task's metric list (all supplied metrics for unknown tasks)."""
    if task not in results:
        raise AggregationError(f"Missing task '{task}'")
    names = spec.task_metrics.get(task) or tuple(results[task])
    return float(np.mean([_require(results, task, name) for name in names]))


def aggregate(results: dict[str, dict[str, float]], spec: AggregationSpec) -> float:
    """
    Aggregate per-task metric maps (percentage points) into one score.

    Raises AggregationError naming the task and metric when a required value
    is absent.
    """
    if spec.mode == 'glue':
        scores = [task_score(results, task, spec) for task in spec.task_metrics if task != 'wnli']
        return float(np.mean(scores + [spec.wnli_value]))

    tasks = [task for task in results if task != 'wnli']
    if not tasks:
        raise AggregationError("AVG needs at least one task besides WNLI")
    if spec.avg_recipe == 'task-score':
        return float(np.mean([task_score(results, task, spec) for task in tasks]))
    values = []
    for task in tasks:
        metric = spec.headline.get(task) or next(iter(results[task]), None)
        if metric is None:
            raise AggregationError(f"Task '{task}' has no metrics")
        values.append(_require(results, task, metric))
    return float(np.mean(values))


@dataclass(frozen=True)
class ComputeEstimate:
    tflops_per_device: float
    device_count: int
    days: float
    utilization: float = DEFAULT_UTILIZATION

    def __post_init__(self):
        for name in ('tflops_per_device', 'device_count', 'days'):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.utilization <= 1.0:
            raise ValueError(f"utilization must be in (0, 1], got {self.utilization}")

    @property
    def pfs_days(self) -> float:
        return estimate_pfs_days(self)


def estimate_pfs_days(est: ComputeEstimate) -> float:
    """Peta-flop/s-days: tflops x devices x utilization x days / 1000."""
    return est.tflops_per_device * est.device_count * est.utilization * est.days / 1000.0


def pfs_days_per_point(pfs_days: float, score: float) -> float:
    """Cost of one score percentage point, as pfs_days / (score / 100)."""
    if not score > 0:
        raise ValueError(f"score must be positive, got {score}")
    return pfs_days / (score / 100.0)


def summarize_seeds(records: pd.DataFrame) -> pd.DataFrame:
    """
    Mean and sample stddev per (model, task, metric) over seed records.

    ``records`` has columns model, task, seed, metric, value.
    """
    grouped = records.groupby(['model', 'task', 'metric'], sort=True)['value']
    summary = grouped.agg(mean='mean', std=lambda v: v.std(ddof=1), seeds='count').reset_index()
    return summary


def build_report(records: pd.DataFrame, spec: AggregationSpec, reported: pd.DataFrame | None = None) -> pd.DataFrame:
    """
    One row per model: per-task headline ``mean ± std`` cells plus the
    aggregate score and its stddev over seeds.

    Rows are sorted by model name so input order never changes the output.
    """
    if records.empty:
        raise AggregationError("No result records to report")
    records = records.sort_values(['model', 'task', 'metric', 'seed'], kind='stable').reset_index(drop=True)
    summary = summarize_seeds(records)
    column = spec.mode.upper()
    rows = []
    for model, model_summary in summary.groupby('model', sort=True):
        means = {
            task: dict(zip(group['metric'], group['mean']))
            for task, group in model_summary.groupby('task', sort=False)
        }
        row = {'model': model}
        for task, group in model_summary.groupby('task', sort=True):
            metric = spec.headline.get(task) or group['metric'].iloc[0]
            match = group[group['metric'] == metric]
            if match.empty:
                continue
            row[task] = _cell(match['mean'].iloc[0], match['std'].iloc[0])
        score = aggregate(means, spec)
        row[column] = score
        row[f'{column}_std'] = _seed_spread(records[records['model'] == model], spec)
        rows.append(row)

    report = pd.DataFrame(rows)
    task_columns = [t for t in GLUE_TASK_METRICS if t in report.columns]
    extra_tasks = sorted(c for c in report.columns if c not in task_columns and c not in
                         ('model', column, f'{column}_std'))
    report = report[['model'] + task_columns + extra_tasks + [column, f'{column}_std']]
    if reported is not None and not reported.empty:
        report = report.merge(reported, on='model', how='outer').sort_values('model', kind='stable')
    return report.reset_index(drop=True)


def _cell(mean: float, std: float) -> str:
    return f"{mean:.1f}" if pd.isna(std) else f"{mean:.1f} ± {std:.2f}"


def _seed_spread(model_records: pd.DataFrame, spec: AggregationSpec) -> float:
    """Sample stddev of the per-seed aggregate, NaN unless at least two seeds cover every task."""
    per_seed = []
    for _, seed_records in model_records.groupby('seed', sort=True):
        results = {
            task: dict(zip(group['metric'], group['value']))
            for task, group in seed_records.groupby('task', sort=False)
        }
        try:
            per_seed.append(aggregate(results, spec))
        except AggregationError:
            return float('nan')
    if len(per_seed) < 2:
        return float('nan')
    return float(pd.Series(per_seed).std(ddof=1))


def render_report(report: pd.DataFrame) -> str:
    formatted = report.copy()
    for col in formatted.columns:
        if pd.api.types.is_float_dtype(formatted[col]):
            formatted[col] = formatted[col].map(lambda v: '' if pd.isna(v) else f"{v:.2f}")
    return formatted.fillna('').to_string(index=False)


RECORD_COLUMNS = ['model', 'task', 'seed', 'metric', 'value']


def records_from_json(record: dict, source: str = '') -> pd.DataFrame:
    """Long-form rows from one ``{model, task, seed, metrics}`` result record."""
    try:
        rows = [
            {'model': str(record['model']), 'task': str(record['task']), 'seed': int(record['seed']),
             'metric': str(metric), 'value': float(value)}
            for metric, value in record['metrics'].items()
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"Malformed result record {source}: {e}") from e
    return pd.DataFrame(rows, columns=RECORD_COLUMNS)


def load_result_records(paths) -> pd.DataFrame:
    """
    Collect result records from JSON files and directories (searched
    recursively). JSON files without a ``metrics`` map (manifests,
    summaries) are skipped.
    """
    files: list[Path] = []
    for path in map(Path, paths):
        if path.is_dir():
            files.extend(sorted(path.rglob('*.json')))
        elif path.is_file():
            files.append(path)
        else:
            raise DataError(f"Result path {path} does not exist")
    frames = []
    for file in files:
        try:
            record = json.loads(file.read_text(encoding='utf-8'))
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"Unreadable result record {file}: {e}") from e
        if not isinstance(record, dict) or not {'task', 'seed', 'metrics'} <= record.keys():
            continue
        record.setdefault('model', file.parent.parent.name)
        frames.append(records_from_json(record, str(file)))
    if not frames:
        return pd.DataFrame(columns=RECORD_COLUMNS)
    return pd.concat(frames, ignore_index=True)


def read_published_table(path: str | Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"Cannot read table {path}: {e}") from e


def load_published_glue(path: str | Path) -> tuple[pd.DataFrame, pd.DataFrame]:
    """
    Published per-task headline numbers as plain records (seed 0), plus the
    published AVG/GLUE columns as a ``reported`` frame keyed by model.
    """
    table = read_published_table(path)
    if 'model' not in table.columns:
        raise DataError(f"{path}: missing 'model' column")
    rows = []
    for _, row in table.iterrows():
        for task, metric in HEADLINE_METRICS.items():
            if task in table.columns and pd.notna(row[task]):
                try:
                    value = float(row[task])
                except ValueError as e:
                    raise DataError(f"{path}: non-numeric {task} for {row['model']}: {row[task]!r}") from e
                rows.append({'model': row['model'], 'task': task, 'seed': 0, 'metric': metric,
                             'value': value})
    reported_columns = ['model'] + [c for c in table.columns if c.startswith('reported_')]
    return pd.DataFrame(rows, columns=RECORD_COLUMNS), table[reported_columns]


def compute_table(table: pd.DataFrame, reference: str | None = None) -> pd.DataFrame:
    """
    Pfs-days, pfs-days per score point and the factor against ``reference``
    for published hardware rows (tflops_per_device, device_count, days,
    utilization, reported_avg, reported_glue).
    """
    out = table.copy()
    try:
        out['pfs_days'] = [
            ComputeEstimate(r.tflops_per_device, int(r.device_count), r.days, r.utilization).pfs_days
            for r in out.itertuples()
        ]
    except (AttributeError, TypeError, ValueError) as e:
        raise DataError(f"Malformed compute table: {e}") from e
    if reference is not None and 'model' not in out.columns:
        raise DataError("Compute table has no 'model' column to find the reference in")
    for score in ('avg', 'glue'):
        column = f'reported_{score}'
        if column not in out.columns:
            continue
        out[f'pfs_per_{score}_point'] = [
            pfs_days_per_point(pfs, value) if pd.notna(value) else np.nan
            for pfs, value in zip(out['pfs_days'], out[column])
        ]
        if reference is not None:
            match = out.loc[out['model'] == reference, f'pfs_per_{score}_point']
            if match.empty:
                raise DataError(f"Reference model '{reference}' not in the compute table")
            out[f'{score}_factor'] = out[f'pfs_per_{score}_point'] / match.iloc[0]
    return out
