"""pytest plugin: any attempt to train a model (epochs > 0) fails the run."""
from ssba.training import BackdoorClassifier

_original_fit = BackdoorClassifier.fit


def _guarded_fit(self, X, y):
    if self.epochs > 0:
        raise RuntimeError("training is disabled while the property suites run")
    return _original_fit(self, X, y)


def pytest_configure(config):
    BackdoorClassifier.fit = _guarded_fit
