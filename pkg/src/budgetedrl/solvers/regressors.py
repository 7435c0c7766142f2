"""
Function approximation for fitted-Q: a budget-encoder Q-network trained with Adam, and an exact tabular regressor.

Both regressors are `BiQFunction`s queried with (state, allocation, action) triples and fitted on the selected
action's heads only. `n_signals` is 2 for budgeted Q-functions (Q_r, Q_c) and 1 for the scalar FTQ(λ) baseline.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy
import torch
from torch import nn

from .bmdp import BiQFunction, BudgetGrid
from .errors import DomainError, RegressorDivergenceError

import logging
logger = logging.getLogger(__name__)

ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh}
INITIALISATIONS = ("xavier", "kaiming")


def _widths(value) -> Tuple[int, ...]:
    """Accept 256x128x64 strings, single ints and sequences."""
    if value is None:
        return None
    if isinstance(value, str):
        return tuple(int(w) for w in value.lower().split("x") if w)
    if isinstance(value, (int, numpy.integer)):
        return (int(value),)
    return tuple(int(w) for w in value)


@dataclass
class RegressorSpec:
    """
    Regressor hyper-parameters, keyed in configuration files like the algorithm parameter tables.

    Attributes:
        kind (str): "neural" (Q-network) or "tabular" (exact lookup, finite instances only).
        hidden_layers (tuple): Hidden widths after the state/budget concatenation.
        budget_encoder_layers (tuple | None): Budget encoder widths; None means one layer as wide as the state.
        activation (str): "relu" or "tanh".
        init_scheme (str): "xavier" or "kaiming".
        learning_rate (float): Adam step size.
        weight_decay (float): L2 penalty weight added to the loss.
        epochs (int): Gradient epochs per fit.
        adam_betas (tuple): Adam moment coefficients.
        adam_eps (float): Adam epsilon.
        batch_size (int | None): Minibatch size, None for full-batch steps.
        normalize (bool): Standardize targets per channel before fitting.
        divergence_factor (float): A loss above this multiple of the first epoch's loss (or of the mean squared target,
            when larger) aborts the fit.
    """

    kind: str = "neural"
    hidden_layers: Tuple[int, ...] = (256, 128, 64)
    budget_encoder_layers: Optional[Tuple[int, ...]] = None
    activation: str = "relu"
    init_scheme: str = "xavier"
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    epochs: int = 5000
    loss: str = "l2"
    optimizer: str = "adam"
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: Optional[int] = None
    normalize: bool = True
    divergence_factor: float = 1e6

    KEYMAP = {
        "architecture": "hidden_layers",
        "size_beta_encoder": "budget_encoder_layers",
        "initialisation": "init_scheme",
        "regularisation": "weight_decay",
        "epoch_nn": "epochs",
        "loss_function": "loss",
        "normalize_reward": "normalize",
    }

    def __post_init__(self):
        self.hidden_layers = _widths(self.hidden_layers)
        self.budget_encoder_layers = _widths(self.budget_encoder_layers)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.loss, self.optimizer = self.loss.lower(), self.optimizer.lower()
        if self.kind not in ("neural", "tabular"):
            raise ValueError(f"unknown regressor kind '{self.kind}'")
        if any(w <= 0 for w in self.hidden_layers + (self.budget_encoder_layers or ())):
            raise ValueError("layer widths must be positive")
        if self.learning_rate <= 0 or self.epochs <= 0:
            raise ValueError("learning_rate and epochs must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")
        if self.init_scheme not in INITIALISATIONS:
            raise ValueError(f"unknown initialisation '{self.init_scheme}'")
        if self.loss not in ("l2", "mse"):
            raise ValueError(f"unsupported loss '{self.loss}'")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer '{self.optimizer}'")

    @classmethod
    def from_dict(cls, mapping) -> "RegressorSpec":
        from budgetedrl.utils import config_from_dict

        return config_from_dict(cls, mapping)


class QNetwork(nn.Module):
    """
    Q-network with a budget encoder: the budget goes through its own layers, is concatenated with the state, and
    the trunk ends in n_signals·n_actions linear heads (all Q_r heads, then all Q_c heads).

    Attributes:
        encoder (nn.Sequential | None): Budget encoder, absent for budget-free (scalar FTQ) networks.
        trunk (nn.Sequential): Hidden layers.
        head (nn.Linear): Output layer.

    Examples:
        >>> net = QNetwork(2, 4, RegressorSpec(hidden_layers=(64, 32)), seed=0)
        >>> net(torch.zeros(5, 2, dtype=torch.float64), torch.zeros(5, dtype=torch.float64)).shape
        torch.Size([5, 8])
    """

    def __init__(
        self, state_dim: int, n_actions: int, spec: RegressorSpec, n_signals: int = 2, use_budget: bool = True, seed: int = 0
    ):
        super().__init__()
        self.state_dim, self.n_actions, self.n_signals, self.use_budget = state_dim, n_actions, n_signals, use_budget
        activation = ACTIVATIONS[spec.activation]

        width = state_dim
        self.encoder = None
        if use_budget:
            layers, previous = [], 1
            for w in spec.budget_encoder_layers or (state_dim,):
                layers += [nn.Linear(previous, w), activation()]
                previous = w
            self.encoder = nn.Sequential(*layers)
            width += previous

        layers = []
        for w in spec.hidden_layers:
            layers += [nn.Linear(width, w), activation()]
            width = w
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Linear(width, n_signals * n_actions)
        self.init_scheme = spec.init_scheme
        self.double()
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    if self.init_scheme == "xavier":
                        nn.init.xavier_uniform_(module.weight)
                    else:
                        nn.init.kaiming_uniform_(module.weight, nonlinearity="relu")
                    nn.init.zeros_(module.bias)

    def forward(self, states: torch.Tensor, budgets: Optional[torch.Tensor] = None) -> torch.Tensor:
        if states.ndim != 2 or states.shape[1] != self.state_dim:
            raise DomainError(f"expected states of shape (N, {self.state_dim}), got {tuple(states.shape)}")
        x = states
        if self.encoder is not None:
            assert budgets is not None, "budget-encoder networks need budgets"
            x = torch.cat([states, self.encoder(budgets.reshape(-1, 1))], dim=1)
        return self.head(self.trunk(x))

    def values(self, states: torch.Tensor, budgets: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Forward pass reshaped to (N, n_actions, n_signals)."""
        out = self.forward(states, budgets)
        return out.reshape(-1, self.n_signals, self.n_actions).transpose(1, 2)


class TargetScaler:
    """Per-channel standardisation of regression targets."""

    def __init__(self, n_signals: int):
        self.mean = numpy.zeros(n_signals)
        self.std = numpy.ones(n_signals)

    def fit(self, targets: numpy.ndarray) -> "TargetScaler":
        self.mean = targets.mean(axis=0)
        std = targets.std(axis=0)
        self.std = numpy.where(std > 1e-12, std, 1.0)
        return self

    def transform(self, targets: numpy.ndarray) -> numpy.ndarray:
        return (targets - self.mean) / self.std

    def inverse(self, values: numpy.ndarray) -> numpy.ndarray:
        return values * self.std + self.mean


def _as_2d(states) -> numpy.ndarray:
    states = numpy.asarray(states, dtype=numpy.float64)
    return states[:, None] if states.ndim == 1 else states


class NeuralRegressor(BiQFunction):
    """
    `BiQFunction` backed by a `QNetwork` trained with Adam on the selected action's heads.

    The network is warm-started across successive `fit` calls; call `reset` for a cold start.

    Args:
        state_dim (int): Dimension of state vectors.
        n_actions (int): Number of discrete actions.
        spec (RegressorSpec): Hyper-parameters.
        n_signals (int): 2 for (Q_r, Q_c), 1 for scalar Q-functions.
        use_budget (bool): Whether the network takes a budget input.
        seed (int): Initialisation seed.
    """

    MAGIC = b"BRLQNET1"

    def __init__(
        self, state_dim: int, n_actions: int, spec: RegressorSpec, n_signals: int = 2, use_budget: bool = True, seed: int = 0
    ):
        self.spec, self.seed = spec, seed
        self.n_actions, self.n_signals, self.use_budget = n_actions, n_signals, use_budget
        self.net = QNetwork(state_dim, n_actions, spec, n_signals, use_budget, seed)
        self.scaler = TargetScaler(n_signals)
        self.loss_trace = numpy.zeros(0)

    @property
    def state_dim(self) -> int:
        return self.net.state_dim

    def reset(self) -> None:
        self.net.reset_parameters(self.seed)
        self.scaler = TargetScaler(self.n_signals)

    def _tensor(self, values, dtype=torch.float64) -> torch.Tensor:
        return torch.as_tensor(numpy.asarray(values), dtype=dtype)

    @torch.no_grad()
    def _values(self, states, budgets=None, chunk: int = 65536) -> numpy.ndarray:
        states = _as_2d(states)
        out = []
        for start in range(0, len(states), chunk):
            s = self._tensor(states[start : start + chunk])
            b = None if budgets is None else self._tensor(numpy.asarray(budgets)[start : start + chunk])
            out.append(self.net.values(s, b).numpy())
        values = numpy.concatenate(out) if out else numpy.zeros((0, self.n_actions, self.n_signals))
        return self.scaler.inverse(values)

    def predict(self, states, budgets, actions) -> numpy.ndarray:
        values = self._values(states, budgets if self.use_budget else None)
        return values[numpy.arange(len(values)), numpy.asarray(actions, dtype=numpy.int64)]

    def predict_grid(self, states, budgets) -> numpy.ndarray:
        states = _as_2d(states)
        budgets = numpy.asarray(budgets, dtype=numpy.float64)
        n, g = len(states), budgets.size
        values = self._values(numpy.repeat(states, g, axis=0), numpy.tile(budgets, n))
        return values.reshape(n, g, self.n_actions, self.n_signals).transpose(0, 2, 1, 3)

    def predict_actions(self, states) -> numpy.ndarray:
        """(N, n_actions) values of a scalar, budget-free network."""
        assert self.n_signals == 1 and not self.use_budget, "predict_actions is for scalar budget-free networks"
        return self._values(states)[..., 0]

    def _loss(self, states, budgets, actions, targets) -> Tuple[torch.Tensor, torch.Tensor]:
        values = self.net.values(states, budgets)
        selected = values[torch.arange(len(actions)), actions]
        data_loss = torch.mean((selected - targets) ** 2)
        penalty = sum(torch.sum(m.weight**2) for m in self.net.modules() if isinstance(m, nn.Linear))
        return data_loss + self.spec.weight_decay * penalty, data_loss

    def fit(self, states, budgets, actions, targets, rng: Optional[numpy.random.Generator] = None) -> numpy.ndarray:
        """
        Minimise the squared error of the selected action's heads, plus the L2 penalty.

        Args:
            states (array): (N, d) states.
            budgets (array | None): (N,) allocations, ignored by budget-free networks.
            actions (array): (N,) selected actions.
            targets (array): (N, n_signals) regression targets.
            rng (numpy.random.Generator | None): Source of the minibatch shuffling seed.

        Returns:
            (numpy.ndarray): Per-epoch data loss (mean squared error on standardized targets).

        Raises:
            RegressorDivergenceError: The loss became non-finite or exceeded `divergence_factor` times its first value,
                or times the mean squared target when that is larger.
        """
        targets = numpy.asarray(targets, dtype=numpy.float64).reshape(len(actions), self.n_signals)
        if len(targets) == 0:
            raise DomainError("cannot fit an empty dataset")
        if self.spec.normalize:
            self.scaler.fit(targets)
        s = self._tensor(_as_2d(states))
        b = self._tensor(budgets) if self.use_budget else None
        a = self._tensor(actions, torch.int64)
        y = self._tensor(self.scaler.transform(targets))

        spec = self.spec
        optimizer = torch.optim.Adam(self.net.parameters(), lr=spec.learning_rate, betas=spec.adam_betas, eps=spec.adam_eps)
        seed = int(rng.integers(2**62)) if rng is not None else self.seed
        generator = torch.Generator().manual_seed(seed)
        n = len(a)
        batch_size = n if spec.batch_size is None else min(spec.batch_size, n)

        trace = numpy.zeros(spec.epochs)
        # a warm start can begin near zero loss; the target scale bounds the reference from below
        scale = max(float(torch.mean(y**2)), 1e-8)
        reference = None
        for epoch in range(spec.epochs):
            order = torch.randperm(n, generator=generator) if batch_size < n else torch.arange(n)
            epoch_loss = 0.0
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                optimizer.zero_grad()
                loss, data_loss = self._loss(s[idx], None if b is None else b[idx], a[idx], y[idx])
                loss.backward()
                optimizer.step()
                epoch_loss += data_loss.item() * len(idx)
            trace[epoch] = epoch_loss / n
            reference = trace[0] if reference is None else reference
            if not numpy.isfinite(trace[epoch]) or trace[epoch] > spec.divergence_factor * max(reference, scale):
                raise RegressorDivergenceError(
                    f"regression diverged at epoch {epoch}: loss {trace[epoch]:.3e} (initial {reference:.3e})",
                    trace[: epoch + 1],
                )
        self.loss_trace = trace
        logger.debug(f"fit {n} samples for {spec.epochs} epochs, final loss {trace[-1]:.4e}")
        return trace

    def save(self, path: Union[str, Path]) -> Path:
        """Flat binary: header (shapes and flags), then row-major parameters and target statistics."""
        from budgetedrl.utils.files import write_records

        encoder = [m.out_features for m in (self.net.encoder or []) if isinstance(m, nn.Linear)]
        hidden = [m.out_features for m in self.net.trunk if isinstance(m, nn.Linear)]
        header = [1, self.state_dim, self.n_actions, self.n_signals, int(self.use_budget),
                  list(ACTIVATIONS).index(self.spec.activation), len(encoder), *encoder, len(hidden), *hidden]
        params = [p.detach().numpy().ravel() for p in self.net.state_dict().values()]
        return write_records(path, self.MAGIC, header, numpy.concatenate(params + [self.scaler.mean, self.scaler.std]))

    @classmethod
    def load(cls, path: Union[str, Path], spec: Optional[RegressorSpec] = None) -> "NeuralRegressor":
        from budgetedrl.utils.files import read_records

        header, payload = read_records(path, cls.MAGIC)
        header = [int(h) for h in header]
        _, state_dim, n_actions, n_signals, use_budget, activation, n_enc = header[:7]
        encoder = tuple(header[7 : 7 + n_enc])
        n_hidden = header[7 + n_enc]
        hidden = tuple(header[8 + n_enc : 8 + n_enc + n_hidden])
        base = spec if spec is not None else RegressorSpec()
        spec = RegressorSpec(**{**base.__dict__, "hidden_layers": hidden, "budget_encoder_layers": encoder or None,
                                "activation": list(ACTIVATIONS)[activation]})
        regressor = cls(state_dim, n_actions, spec, n_signals, bool(use_budget))
        state, offset = regressor.net.state_dict(), 0
        for name, tensor in state.items():
            size = tensor.numel()
            state[name] = torch.as_tensor(payload[offset : offset + size].reshape(tensor.shape), dtype=tensor.dtype)
            offset += size
        if payload.size != offset + 2 * n_signals:
            raise DomainError(f"{path}: parameter payload does not match the header")
        regressor.net.load_state_dict(state)
        regressor.scaler.mean = payload[offset : offset + n_signals].copy()
        regressor.scaler.std = payload[offset + n_signals :].copy()
        return regressor


def finite_difference_check(
    regressor: NeuralRegressor, states, budgets, actions, targets, h: float = 1e-5
) -> Dict[str, float]:
    """
    Compare autograd parameter gradients of the training loss with central finite differences.

    Returns:
        (Dict[str, float]): Relative error ‖g_auto - g_fd‖ / max(‖g_auto‖ + ‖g_fd‖, 1e-12) per parameter tensor.
    """
    s = torch.as_tensor(_as_2d(states), dtype=torch.float64)
    b = torch.as_tensor(numpy.asarray(budgets), dtype=torch.float64) if regressor.use_budget else None
    a = torch.as_tensor(numpy.asarray(actions), dtype=torch.int64)
    y = torch.as_tensor(numpy.asarray(targets, dtype=numpy.float64).reshape(len(a), regressor.n_signals))

    regressor.net.zero_grad()
    loss, _ = regressor._loss(s, b, a, y)
    loss.backward()

    errors = {}
    with torch.no_grad():
        for name, param in regressor.net.named_parameters():
            analytic = param.grad.detach().clone().ravel()
            numeric = torch.zeros_like(analytic)
            flat = param.data.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + h
                plus = regressor._loss(s, b, a, y)[0].item()
                flat[i] = original - h
                minus = regressor._loss(s, b, a, y)[0].item()
                flat[i] = original
                numeric[i] = (plus - minus) / (2 * h)
            scale = max((analytic.norm() + numeric.norm()).item(), 1e-12)
            errors[name] = (analytic - numeric).norm().item() / scale
    return errors


class TabularRegressor(BiQFunction):
    """
    Exact lookup regressor on the (state, action, allocation-grid index) lattice.

    `fit` stores the mean target per key, replacing the previous table; unseen keys predict zero. States are keyed
    by their raw float64 bytes. Without a grid the allocation is ignored (budget-free scalar Q-functions).

    Examples:
        >>> reg = TabularRegressor(n_actions=2, grid=BudgetGrid.uniform(0, 0.5, 1), n_signals=1)
        >>> _ = reg.fit([[0.0], [0.0]], [0.5, 0.5], [1, 1], [[1.0], [3.0]])
        >>> reg.predict([[0.0]], [0.5], [1])
        array([[2.]])
    """

    def __init__(self, n_actions: int, grid: Optional[BudgetGrid] = None, n_signals: int = 2):
        self.n_actions, self.grid, self.n_signals = n_actions, grid, n_signals
        self._rows: Dict[bytes, int] = {}
        self.table = numpy.zeros((0, n_actions, self._n_budgets, n_signals))
        self.loss_trace = numpy.zeros(0)

    def reset(self) -> None:
        self._rows = {}
        self.table = numpy.zeros((0, self.n_actions, self._n_budgets, self.n_signals))

    @property
    def _n_budgets(self) -> int:
        return 1 if self.grid is None else len(self.grid)

    @staticmethod
    def _keys(states) -> list:
        states = numpy.ascontiguousarray(_as_2d(states))
        return [row.tobytes() for row in states]

    def _lookup(self, states, create: bool = False) -> numpy.ndarray:
        rows = numpy.empty(len(_as_2d(states)), dtype=numpy.int64)
        for i, key in enumerate(self._keys(states)):
            if create and key not in self._rows:
                self._rows[key] = len(self._rows)
            rows[i] = self._rows.get(key, -1)
        return rows

    def _budget_index(self, budgets) -> numpy.ndarray:
        if self.grid is None:
            return numpy.zeros(numpy.size(budgets) if budgets is not None else 0, dtype=numpy.int64)
        idx, n_off = self.grid.project(budgets)
        if n_off:
            logger.debug(f"{n_off} allocations projected on the grid")
        return idx

    def fit(self, states, budgets, actions, targets, rng=None) -> numpy.ndarray:
        actions = numpy.asarray(actions, dtype=numpy.int64)
        targets = numpy.asarray(targets, dtype=numpy.float64).reshape(len(actions), self.n_signals)
        rows = self._lookup(states, create=True)
        cols = self._budget_index(budgets if budgets is not None else numpy.zeros(len(actions)))
        shape = (len(self._rows), self.n_actions, self._n_budgets)
        sums = numpy.zeros(shape + (self.n_signals,))
        counts = numpy.zeros(shape)
        numpy.add.at(sums, (rows, actions, cols), targets)
        numpy.add.at(counts, (rows, actions, cols), 1.0)
        self.table = numpy.divide(sums, counts[..., None], out=numpy.zeros_like(sums), where=counts[..., None] > 0)
        residual = targets - self.table[rows, actions, cols]
        self.loss_trace = numpy.asarray([numpy.mean(residual**2)])
        return self.loss_trace

    def _gather(self, rows, actions, cols) -> numpy.ndarray:
        out = numpy.zeros((len(rows), self.n_signals))
        seen = rows >= 0
        out[seen] = self.table[rows[seen], actions[seen], cols[seen]]
        return out

    def predict(self, states, budgets, actions) -> numpy.ndarray:
        rows = self._lookup(states)
        actions = numpy.asarray(actions, dtype=numpy.int64)
        cols = self._budget_index(budgets if budgets is not None else numpy.zeros(len(actions)))
        return self._gather(rows, actions, cols)

    def predict_grid(self, states, budgets) -> numpy.ndarray:
        rows = self._lookup(states)
        cols = self._budget_index(budgets)
        out = numpy.zeros((len(rows), self.n_actions, len(cols), self.n_signals))
        seen = rows >= 0
        out[seen] = self.table[rows[seen]][:, :, cols]
        return out

    def predict_actions(self, states) -> numpy.ndarray:
        assert self.n_signals == 1, "predict_actions is for scalar regressors"
        rows = self._lookup(states)
        out = numpy.zeros((len(rows), self.n_actions))
        seen = rows >= 0
        out[seen] = self.table[rows[seen], :, 0, 0]
        return out


def make_regressor(
    spec: RegressorSpec,
    state_dim: int,
    n_actions: int,
    grid: Optional[BudgetGrid] = None,
    n_signals: int = 2,
    seed: int = 0,
) -> Union[NeuralRegressor, TabularRegressor]:
    """Build the regressor named by `spec.kind`; `grid=None` means budget-free."""
    if spec.kind == "tabular":
        return TabularRegressor(n_actions, grid, n_signals)
    return NeuralRegressor(state_dim, n_actions, spec, n_signals, use_budget=grid is not None, seed=seed)
