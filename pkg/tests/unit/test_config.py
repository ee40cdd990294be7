import pytest
from jump_fbsde.config import (
    DEFAULT_VALUES,
    InvalidConfigArguments,
    parse_config_text,
    read_config_file,
)


def test_parse_config_text_types_and_comments():
    text = """
    # smooth test problem
    problem = ou_lipschitz
    T = 1.0
    n_steps = 16   # coarse
    beta_const = 0.25
    """
    config = parse_config_text(text)
    assert config == {"problem": "ou_lipschitz", "T": 1.0, "n_steps": 16, "beta_const": 0.25}
    assert isinstance(config["n_steps"], int)


def test_parse_config_text_unknown_keys():
    with pytest.raises(InvalidConfigArguments, match="colour, shape"):
        parse_config_text("problem = driftless\nshape = 1\ncolour = 2\n")


@pytest.mark.parametrize("text", ["n_steps = many", "problem driftless"])
def test_parse_config_text_malformed(text):
    with pytest.raises(InvalidConfigArguments):
        parse_config_text(text)


def test_read_config_file(tmp_path):
    path = tmp_path / "problem.cfg"
    path.write_text("problem = linear_jump\nlambda_const = 2\n", encoding="utf-8")
    assert read_config_file(path) == {"problem": "linear_jump", "lambda_const": 2.0}


def test_default_values():
    assert DEFAULT_VALUES["picard_tol"] == 1e-12
    assert DEFAULT_VALUES["picard_max_iter"] == 50
    assert DEFAULT_VALUES["fine_factor"] == 4
