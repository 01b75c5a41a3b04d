import numpy as np
import pytest
from sklearn.base import clone

from adaptgs import GaussianSplatRegressor, GaussianSet
from adaptgs.estimator import NotFittedError, check_scenes
from adaptgs.scene import SceneSpec, generate_scene, save_scene

SMALL = ("encoder.channels=8, 16, 16",)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(21, SceneSpec(n_views=3, n_targets=1, resolution=32))


@pytest.fixture(scope="module")
def fitted(scene):
    return GaussianSplatRegressor(steps=2, overrides=SMALL).fit([scene])


def test_params_round_trip():
    est = GaussianSplatRegressor(steps=3, preset="hyper", overrides=SMALL)
    params = est.get_params()
    assert params["steps"] == 3 and params["preset"] == "hyper"
    assert clone(est).get_params() == params
    est.set_params(lr=1e-4)
    assert est.lr == 1e-4


def test_unfitted_raises(scene):
    with pytest.raises(NotFittedError):
        GaussianSplatRegressor().predict([scene])


def test_bad_preset(scene):
    with pytest.raises(ValueError):
        GaussianSplatRegressor(steps=1, preset="nope").fit([scene])


def test_check_scenes(tmp_path, scene):
    with pytest.raises(ValueError):
        check_scenes([])
    with pytest.raises(TypeError):
        check_scenes([1, 2])
    with pytest.raises(ValueError):
        check_scenes([scene], min_views=4)
    save_scene(scene, tmp_path / "s")
    loaded = check_scenes(tmp_path / "s")
    assert len(loaded) == 1 and len(loaded[0].inputs) == 3


def test_fit_records_history(fitted):
    assert fitted.n_steps_ == 2
    assert fitted.history_[-1]["lr"] == 0.0


def test_transform_predict_score(fitted, scene):
    (g,) = fitted.transform([scene])
    assert isinstance(g, GaussianSet) and len(g) > 0
    (img,) = fitted.predict(scene)
    assert img.shape == (1, 3, 32, 32)
    score = fitted.score([scene])
    assert np.isfinite(score) and 0 < score <= 99
    assert fitted.metrics([scene], views_in=3).views_in == 3


def test_save_load_identical_predictions(tmp_path, fitted, scene):
    path = tmp_path / "m.ckpt"
    fitted.save(path)
    again = GaussianSplatRegressor.load(path)
    assert again.get_params()["steps"] == 2
    assert np.array_equal(fitted.predict([scene])[0], again.predict([scene])[0])
