"""
Published table values and acceptance bands for the shipped presets.

Values are the quantized-or-dequantized numbers as published (parenthesized
quantized variants omitted); None marks an N/A cell.
"""

import dataclasses
from typing import Callable, Dict, List, Optional

from density_ood.models import EvalReport


@dataclasses.dataclass(frozen=True)
class PublishedRow:
    """One row of a published results table."""
    table: str
    model: str
    test: Optional[str]
    ood: Optional[str]
    samples: Optional[str]
    auc: str
    params: str


@dataclasses.dataclass(frozen=True)
class Band:
    """A pass/fail criterion on a report."""
    description: str
    check: Callable[[EvalReport], bool]

    def passes(self, report: EvalReport) -> bool:
        try:
            return bool(self.check(report))
        except (TypeError, ValueError, ZeroDivisionError):
            return False


TABLE_TITLES: Dict[str, str] = {
    "fashion-raw": "Fashion-MNIST vs MNIST digits, raw pixels",
    "cifar-raw": "CIFAR10 vs SVHN, raw pixels",
    "fashion-rebasis": "Fashion-MNIST vs MNIST digits, orthonormal re-basis",
    "cifar-rebasis": "CIFAR10 vs SVHN, orthonormal re-basis",
    "fashion-pca": "Fashion-MNIST vs MNIST digits, 100/784 components",
    "cifar-pca": "CIFAR10 vs SVHN, 2500/3072 components",
}

PUBLISHED: Dict[str, PublishedRow] = {
    "fashion-raw-normal": PublishedRow("fashion-raw", "Normal", "294.4", "-30.7", "309.3", "0.865", "307.7k"),
    "fashion-raw-maf5": PublishedRow("fashion-raw", "MAF5", "613.3", "-516.9", "646.8", "0.918", "1.1M"),
    "fashion-raw-maf5-10k": PublishedRow("fashion-raw", "MAF5 (10k)", "613.3", "-516.9", "646.8", "0.918", "1.1M"),
    "fashion-raw-maf10": PublishedRow("fashion-raw", "MAF10", "1749", "1267", "1978", "0.735", "34.6M"),
    "fashion-raw-bnaf": PublishedRow("fashion-raw", "BNAF", "1906", "1943", None, "0.5", "44.4M"),
    "cifar-raw-normal": PublishedRow("cifar-raw", "Normal", "5060.4", "-199.3k", "5270", "1.0", "4.7M"),
    "cifar-raw-maf5": PublishedRow("cifar-raw", "MAF5", "2088", "-7240", "2161", "1.0", "4.6M"),
    "cifar-raw-maf10": PublishedRow("cifar-raw", "MAF10", "4776", "-1471", "5018", "1.0", "105M"),
    "fashion-rebasis-maf5": PublishedRow("fashion-rebasis", "MAF5", "552.9", "141.9", "529.8", "0.843", "1.1M"),
    "fashion-rebasis-maf10": PublishedRow("fashion-rebasis", "MAF10", "923.2", "308.0", "976.7", "0.862", "34.6M"),
    "fashion-rebasis-bnaf": PublishedRow("fashion-rebasis", "BNAF", "1406", "674.0", None, "0.83", "44.4M"),
    "cifar-rebasis-maf5": PublishedRow("cifar-rebasis", "MAF5", "5668", "-inf", "5797", "1.0", "4.6M"),
    "cifar-rebasis-maf10": PublishedRow("cifar-rebasis", "MAF10", "5716", "-inf", "5902", "1.0", "105M"),
    "fashion-pca-ppca": PublishedRow("fashion-pca", "PPCA", "59.4", "-614.9", "60.5", "0.958", "5k"),
    "fashion-pca-maf5": PublishedRow("fashion-pca", "MAF5", "-55.4", "-164.9", "-55.4", "0.978", "153k"),
    "fashion-pca-maf10": PublishedRow("fashion-pca", "MAF10", "-25.3", "-137.3", "-21.6", "0.978", "13.6M"),
    "fashion-pca-bnaf": PublishedRow("fashion-pca", "BNAF", "4.7", "-226", None, "0.991", "743k"),
    "cifar-pca-ppca": PublishedRow("cifar-pca", "PPCA", "5007", "-227.3k", "5208", "1.0", "3.1M"),
    "cifar-pca-maf5": PublishedRow("cifar-pca", "MAF5", "3442", "-4280", "3526", "1.0", "3.8M"),
    "cifar-pca-maf10": PublishedRow("cifar-pca", "MAF10", "3497", "-624", "3542", "1.0", "87.4M"),
}


def _within(value: float, target: float, tolerance: float) -> bool:
    return abs(value - target) <= tolerance


def _close_means(r: EvalReport, fraction: float) -> bool:
    scale = max(abs(r.mean_test_ll), abs(r.mean_ood_ll))
    return abs(r.mean_test_ll - r.mean_ood_ll) <= fraction * scale


BANDS: Dict[str, List[Band]] = {
    "fashion-raw-normal": [
        Band("AUC 0.865 +/- 0.02", lambda r: _within(r.auc, 0.865, 0.02)),
        Band("test LL 294.4 +/- 15", lambda r: _within(r.mean_test_ll, 294.4, 15.0)),
    ],
    "cifar-raw-normal": [
        Band("AUC >= 0.995", lambda r: r.auc >= 0.995),
        Band("OoD LL <= -10 x test LL", lambda r: r.mean_test_ll > 0
             and r.mean_ood_ll <= -10.0 * r.mean_test_ll),
    ],
    "fashion-pca-ppca": [Band("AUC 0.958 +/- 0.02", lambda r: _within(r.auc, 0.958, 0.02))],
    "fashion-raw-maf5": [
        Band("AUC 0.918 +/- 0.05", lambda r: _within(r.auc, 0.918, 0.05)),
        Band("test LL > OoD LL", lambda r: r.mean_test_ll > r.mean_ood_ll),
    ],
    "fashion-raw-maf5-10k": [Band("AUC >= 0.85", lambda r: r.auc >= 0.85)],
    "cifar-raw-maf5": [Band("AUC >= 0.995", lambda r: r.auc >= 0.995)],
    "cifar-rebasis-maf5": [Band("AUC >= 0.995", lambda r: r.auc >= 0.995)],
    "fashion-raw-bnaf": [
        Band("AUC <= 0.7", lambda r: r.auc <= 0.7),
        Band("test and OoD LL within 10%", lambda r: _close_means(r, 0.1)),
    ],
    "fashion-pca-bnaf": [
        Band("AUC >= 0.97", lambda r: r.auc >= 0.97),
        Band("OoD LL >= 100 nats below test", lambda r: r.mean_ood_ll <= r.mean_test_ll - 100.0),
    ],
}


def bands_for(name: str) -> List[Band]:
    return BANDS.get(name, [])
