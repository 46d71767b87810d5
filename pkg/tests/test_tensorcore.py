import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from proxytransfer import tensorcore as tc
from proxytransfer.errors import ContractError, DegenerateInputError, DimensionError
from proxytransfer.tensorcore import Tensor

from fd import check_gradients
from gradcases import CASES, rng_for

CONFIGS = 20
TOL = 1e-5


# -- examples -------------------------------------------------------------------------

def test_matmul_examples():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(tc.matmul(eye, b).data, b.data)
    assert tc.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_sum():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert check_gradients(lambda x, y: tc.tsum(tc.matmul(x, y)), [a, b], wrt=[0]) <= 1e-6


def test_l2_normalize_examples():
    assert np.allclose(tc.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=0)
    assert tc.l2_normalize(Tensor([5.0, 0.0])).data.tolist() == [1.0, 0.0]
    with pytest.raises(DegenerateInputError):
        tc.l2_normalize(Tensor([0.0, 0.0]))


def test_euclidean_distance_examples():
    d = lambda a, b: tc.euclidean_distance(Tensor(a), Tensor(b)).item()
    assert d([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert d([1.0, 0.0], [-1.0, 0.0]) == 2.0
    assert d([0.0, 1.0], [1.0, 0.0]) == pytest.approx(np.sqrt(2), abs=1e-15)
    with pytest.raises(DimensionError):
        tc.euclidean_distance(Tensor([1.0, 0.0]), Tensor([1.0, 0.0, 0.0]))


def test_distance_gradient_is_zero_at_coincidence():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([1.0, 2.0], requires_grad=True)
    tc.backward(tc.euclidean_distance(a, b))
    assert np.all(a.grad == 0) and np.all(b.grad == 0)


def test_backward_examples():
    theta = Tensor(np.array([0.3, -1.0, 2.0]), requires_grad=True)
    tc.backward(tc.tsum(theta))
    assert theta.grad.tolist() == [1.0, 1.0, 1.0]

    theta = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    tc.backward(tc.tsum(theta * theta))
    assert theta.grad.tolist() == [2.0, 4.0]


def test_backward_accumulates_without_reset():
    theta = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = tc.tsum(theta * theta)
    tc.backward(loss)
    tc.backward(loss)
    assert theta.grad.tolist() == [4.0, 8.0]
    theta.zero_grad()
    assert theta.grad is None


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        tc.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_graph_is_topological_and_visited_once():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    h = tc.relu(tc.matmul(x, w))
    loss = tc.tsum(tc.exp(h) + h)  # h feeds two consumers
    nodes = tc.graph(loss)
    position = {n.out_id: i for i, n in enumerate(nodes)}
    for node in nodes:
        for src in node.input_ids:
            if src in position:
                assert position[src] < position[node.out_id]
    assert len({n.out_id for n in nodes}) == len(nodes)

    calls = []
    for node in nodes:
        fn = node.backward_fn
        node.backward_fn = lambda g, fn=fn, op=node.op: calls.append(op) or fn(g)
    tc.backward(loss)
    assert len(calls) == len(nodes)


def test_every_reachable_parameter_gets_grad():
    rng = np.random.default_rng(2)
    params = [Tensor(rng.normal(size=s), requires_grad=True) for s in [(3, 4), (4,), (4, 2)]]
    x = Tensor(rng.normal(size=(5, 3)))
    out = tc.matmul(tc.relu(tc.matmul(x, params[0]) + params[1]) + 1.0, params[2])
    tc.backward(tc.mean(out))
    assert all(p.grad is not None and p.grad.shape == p.shape for p in params)


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with tc.no_grad():
        b = tc.exp(a) * 2.0
    assert b.node is None and not b.requires_grad


def test_float32_stays_float32():
    a = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    out = tc.l2_normalize(a * 0.5 + 1.0, axis=1)
    assert out.dtype == np.float32
    tc.backward(tc.tsum(out))
    assert a.grad.dtype == np.float32


# -- finite-difference suite ------------------------------------------------------------

@pytest.mark.parametrize("op", sorted(CASES))
def test_gradients_match_finite_differences(op):
    worst = 0.0
    for i in range(CONFIGS):
        fn, inputs = CASES[op](rng_for(op, i))
        worst = max(worst, check_gradients(fn, inputs))
    assert worst <= TOL, f"{op}: max relative error {worst:.2e}"


# -- properties -------------------------------------------------------------------------

def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(2, 3, 8, 8)).astype(np.float32), rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    a = tc.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    b = tc.conv2d(Tensor(x.copy()), Tensor(w.copy()), stride=2, padding=1).data
    assert a.tobytes() == b.tobytes()


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(3, 4))
    alpha, beta = 0.7, -1.3

    def losses(x):
        return tc.tsum(tc.exp(x) * x), tc.tsum(tc.l2_normalize(x, axis=1) * 2.0)

    grads = []
    for combo in [(1.0, 0.0), (0.0, 1.0), (alpha, beta)]:
        x = Tensor(x0.copy(), requires_grad=True)
        l1, l2 = losses(x)
        tc.backward(l1 * combo[0] + l2 * combo[1])
        grads.append(x.grad)
    assert np.max(np.abs(grads[2] - (alpha * grads[0] + beta * grads[1]))) <= 1e-10


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_l2_normalize_unit_rows(x):
    if np.any(np.linalg.norm(x, axis=1) <= tc.NORM_EPS):
        with pytest.raises(DegenerateInputError):
            tc.l2_normalize(Tensor(x), axis=1)
        return
    out = tc.l2_normalize(Tensor(x), axis=1).data
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_logsumexp_matches_direct_form(x):
    direct = np.log(np.exp(x).sum(axis=1))
    assert np.allclose(tc.logsumexp(Tensor(x), axis=1).data, direct, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
              elements=st.floats(-10, 10, allow_nan=False)),
       arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
              elements=st.floats(-10, 10, allow_nan=False)))
def test_pairwise_distances_symmetric_and_nonnegative(a, b):
    d = b.shape[1]
    a = np.resize(a, (a.shape[0], d))
    dab = tc.pairwise_distances(Tensor(a), Tensor(b)).data
    dba = tc.pairwise_distances(Tensor(b), Tensor(a)).data
    assert np.all(dab >= 0)
    assert np.allclose(dab, dba.T, rtol=0, atol=1e-12)
    assert np.allclose(np.diag(tc.pairwise_distances(Tensor(a), Tensor(a)).data), 0.0)
