"""Compression, completion, outlier detection and backtesting."""
from .backtest import BASELINES, BacktestReport, DayRecord, MethodSummary, backtest
from .completion import CompletionConfig, CompletionResult, calibrate_codes, complete, decode_at, full_code
from .compression import CompressionResult, compress_autoencoder, compress_functional, compress_pca
from .metrics import completion_rmse, mean_level, reconstruction_rmse, rmse
from .outliers import CorruptionResult, OutlierReport, corruption_check, detect_outliers, reconstruction_errors
from .theta import ThetaResult, calendar_theta, lattice, total_variance

__all__ = [
    "BASELINES", "BacktestReport", "DayRecord", "MethodSummary", "backtest",
    "CompletionConfig", "CompletionResult", "calibrate_codes", "complete", "decode_at", "full_code",
    "CompressionResult", "compress_autoencoder", "compress_functional", "compress_pca",
    "completion_rmse", "mean_level", "reconstruction_rmse", "rmse",
    "CorruptionResult", "OutlierReport", "corruption_check", "detect_outliers", "reconstruction_errors",
    "ThetaResult", "calendar_theta", "lattice", "total_variance",
]
