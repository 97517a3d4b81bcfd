import pytest
import torch
import torch.nn.functional as F

from cign import architectures
from cign.graph import (
    CIGN,
    RoutingInvariantError,
    RoutingPolicy,
    TreeSpec,
    check_routing_invariants,
    classification_loss,
    ig_losses,
    one_hot_psi,
    route,
    total_loss,
)
from cign.substrate import ConfigurationError, backward, forward_layer

from oracles import finite_difference_grad, relative_error
from trees import tiny_tree

D = torch.float64


def _batch(n, seed=0, classes=3):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 1, 8, 8, generator=g, dtype=D), torch.randint(0, classes, (n,), generator=g)


def _model(router_source="fed_from_F", branching=(2, 2), seed=0):
    m = CIGN(tiny_tree(router_source, branching), seed=seed, dtype=D)
    # spread router outputs so argmax decisions vary across samples
    with torch.no_grad():
        g = torch.Generator().manual_seed(seed + 100)
        for name, p in m.params.items():
            if p.tag == "H" or name.endswith("bias"):
                p.value.add_(0.5 * torch.randn(p.value.shape, generator=g, dtype=D))
    return m


def test_psi_examples():
    assert one_hot_psi(torch.tensor([0.3, 0.7])).tolist() == [0, 1]
    assert one_hot_psi(torch.tensor([1.0, 0.0, 0.0])).tolist() == [1, 0, 0]
    assert one_hot_psi(torch.tensor([0.5, 0.5])).tolist() == [1, 0]


def test_route_examples():
    dense = route(torch.tensor([[0.9, 0.1], [0.2, 0.8]]), RoutingPolicy("train", 0.0))
    assert dense.all()
    member = route(torch.tensor([[0.45, 0.55], [0.3, 0.7]]), RoutingPolicy("train", 0.4))
    assert member.tolist() == [[True, True], [False, True]]
    assert route(torch.tensor([[0.51, 0.49]]), RoutingPolicy("eval", 0.4)).tolist() == [[True, False]]


def test_route_threshold_bound():
    with pytest.raises(ConfigurationError):
        route(torch.tensor([[0.5, 0.5]]), RoutingPolicy("train", 0.6))
    with pytest.raises(ConfigurationError):
        route(torch.full((1, 3), 1 / 3), RoutingPolicy("train", 0.4))
    # threshold exactly 1/K keeps every sample on at least one path
    p = torch.tensor([[0.5, 0.5], [0.7, 0.3]])
    assert route(p, RoutingPolicy("train", 0.5)).any(dim=1).all()


def test_tree_spec_validation():
    t = tiny_tree()
    assert len(t.split_nodes) == 3 and len(t.leaf_nodes) == 4
    assert t.path_to(5) == [0, 2, 5]
    with pytest.raises(ConfigurationError):
        TreeSpec(t.branching, t.nodes, num_classes=5)
    assert TreeSpec.from_dict(t.to_dict()) == t


@pytest.mark.parametrize("router_source", ["fed_from_F", "independent"])
def test_eval_forward_partitions_batch(router_source):
    m = _model(router_source)
    x, y = _batch(64)
    res = m.forward(x, y, RoutingPolicy("eval"), tau=1.0)
    check_routing_invariants(res.state, m.tree, "eval")
    assign = res.state.leaf_assignment(m.tree)
    assert (assign.sum(1) == 1).all()
    assert sum(len(r) for r in res.leaf_rows.values()) == 64


def test_train_forward_rho_zero_is_dense():
    m = _model()
    x, y = _batch(32)
    res = m.forward(x, y, RoutingPolicy("train", 0.0), tau=25.0)
    check_routing_invariants(res.state, m.tree, "train", 0.0)
    for leaf in m.tree.leaf_nodes:
        assert res.state.masks[leaf.index].all()
        assert len(res.leaf_rows[leaf.index]) == 32


def test_train_forward_threshold_cover():
    m = _model()
    x, y = _batch(64)
    res = m.forward(x, y, RoutingPolicy("train", 0.45), tau=1.0)
    check_routing_invariants(res.state, m.tree, "train", 0.45)
    visits = res.state.leaf_assignment(m.tree).sum(1)
    assert (visits >= 1).all() and (visits <= 4).all()


def test_invariant_checker_detects_violation():
    m = _model()
    x, y = _batch(16)
    res = m.forward(x, y, RoutingPolicy("eval"), tau=1.0)
    res.state.masks[1] = res.state.masks[0].clone()
    res.state.masks[2] = res.state.masks[0].clone()
    with pytest.raises(RoutingInvariantError):
        check_routing_invariants(res.state, m.tree, "eval")


@pytest.mark.parametrize("router_source", ["fed_from_F", "independent"])
def test_eval_routing_is_temperature_invariant(router_source):
    m = _model(router_source)
    x, _ = _batch(64)
    _, leaf_a = m.predict_logits(x, tau=1.0)
    _, leaf_b = m.predict_logits(x, tau=37.0)
    _, leaf_c = m.predict_logits(x, tau=0.01)
    assert torch.equal(leaf_a, leaf_b) and torch.equal(leaf_a, leaf_c)


def standalone_path_logits(model, x, leaf):
    """Run the F stacks along one root-leaf path as a plain sequential network."""
    h = model.prepare_input(x)
    for node in model.tree.path_to(leaf):
        for li, layer in enumerate(model.tree.nodes[node].f_layers):
            h = forward_layer(layer, h, model.params, f"n{node}.F{li}", "eval")
    return h


@pytest.mark.parametrize("router_source", ["fed_from_F", "independent"])
def test_single_sample_eval_equals_standalone_path(router_source):
    m = _model(router_source)
    x, _ = _batch(20, seed=3)
    for i in range(20):
        logits, leaf = m.predict_logits(x[i:i + 1])
        ref = standalone_path_logits(m, x[i:i + 1], int(leaf))
        assert (logits - ref).abs().max().item() < 1e-6


def test_classification_loss_examples():
    n = 1
    # true-class probability 1 -> zero loss
    big = torch.tensor([[50.0, -50.0, -50.0]], dtype=D)
    loss = classification_loss({3: big}, {3: torch.tensor([0])}, torch.tensor([0]), n)
    assert loss.item() < 1e-12
    uniform = torch.zeros(1, 10, dtype=D)
    loss = classification_loss({3: uniform}, {3: torch.tensor([0])}, torch.tensor([0]), n)
    assert loss.item() == pytest.approx(2.302585, abs=1e-6)
    # one sample on two leaves with true-class probabilities 0.5 and 0.25
    l1 = torch.log(torch.tensor([[0.5, 0.5]], dtype=D))
    l2 = torch.log(torch.tensor([[0.25, 0.75]], dtype=D))
    loss = classification_loss(
        {3: l1, 4: l2}, {3: torch.tensor([0]), 4: torch.tensor([0])}, torch.tensor([0]), 1
    )
    assert loss.item() == pytest.approx(1.039721, abs=1e-6)


def test_classification_loss_requires_coverage():
    with pytest.raises(RoutingInvariantError):
        classification_loss({3: torch.zeros(1, 3)}, {3: torch.tensor([0])}, torch.tensor([0, 1]), 2)


def test_total_loss_without_ig_equals_classification():
    m = _model()
    x, y = _batch(16)
    res = m.forward(x, y, RoutingPolicy("train", 0.0), tau=5.0)
    cls = classification_loss(res.leaf_logits, res.leaf_rows, y, 16)
    total = total_loss(cls, ig_losses(res.joints, 0.0, 2.0))
    assert total.item() == cls.item()


def _cign_total_loss(m, x, y, policy, tau=2.0, lambda_ig=1.0, lambda_balance=2.0):
    res = m.forward(x, y, policy, tau)
    cls = classification_loss(res.leaf_logits, res.leaf_rows, y, len(y))
    return total_loss(cls, ig_losses(res.joints, lambda_ig, lambda_balance))


@pytest.mark.parametrize("router_source", ["fed_from_F", "independent"])
def test_total_loss_gradient_matches_finite_differences(router_source):
    m = _model(router_source, seed=1)
    x, y = _batch(12, seed=5)
    policy = RoutingPolicy("train", 0.0)
    backward(_cign_total_loss(m, x, y, policy), m.params)
    analytic = [p.grad for p in m.params.values()]
    numeric = finite_difference_grad(lambda: _cign_total_loss(m, x, y, policy), m.params.tensors())
    assert relative_error(analytic, numeric) < 1e-4
    # router parameters get gradient from the IG terms
    assert any(p.grad.abs().sum() > 0 for p in m.params.values() if p.tag == "H")


def test_unvisited_path_gets_exactly_zero_gradient():
    m = _model()
    x, y = _batch(1, seed=2)
    loss = _cign_total_loss(m, x, y, RoutingPolicy("eval"))
    backward(loss, m.params)
    _, leaf = m.predict_logits(x)
    path = set(m.tree.path_to(int(leaf)))
    for node in m.tree.nodes:
        for name in m.parameter_names(node.index, "F"):
            g = m.params[name].grad
            if node.index not in path:
                assert torch.count_nonzero(g) == 0, name


def test_fed_router_ig_reaches_f_params_but_independent_does_not():
    x, y = _batch(16, seed=4)
    for source, expect in (("fed_from_F", True), ("independent", False)):
        m = _model(source)
        res = m.forward(x, y, RoutingPolicy("train", 0.0), tau=2.0)
        loss = total_loss(torch.zeros((), dtype=D), ig_losses(res.joints, 1.0, 2.0))
        backward(loss, m.params)
        root_f = [m.params[n].grad for n in m.parameter_names(0, "F")]
        assert any(g.abs().sum() > 0 for g in root_f) == expect


@pytest.mark.parametrize("router_source", ["fed_from_F", "independent"])
def test_single_path_gradients_equal_standalone_network(router_source):
    m = _model(router_source, seed=2)
    x, y = _batch(6, seed=9)
    for i in range(6):
        xi, yi = x[i:i + 1], y[i:i + 1]
        res = m.forward(xi, yi, RoutingPolicy("eval"), tau=1.0)
        cls = classification_loss(res.leaf_logits, res.leaf_rows, yi, 1)
        backward(cls, m.params)
        cign_grads = {n: p.grad.clone() for n, p in m.params.items()}
        (leaf,) = res.leaf_rows.keys()
        ref = F.cross_entropy(standalone_path_logits(m, xi, leaf), yi)
        backward(ref, m.params)
        for name, p in m.params.items():
            if p.tag == "F":
                assert (cign_grads[name] - p.grad).abs().max().item() < 1e-6, name


@pytest.mark.parametrize("arch", architectures.ARCHITECTURES)
@pytest.mark.parametrize("variant", ["cign_fed", "cign_independent"])
def test_full_size_eval_forward_runs(arch, variant):
    m = CIGN(architectures.build(arch, variant), seed=0)
    x = torch.rand(7, 28, 28, 1)
    res = m.forward(x, torch.arange(7) % 10, RoutingPolicy("eval"), tau=1.0)
    check_routing_invariants(res.state, m.tree, "eval")


def test_baseline_tree_is_a_single_leaf():
    m = CIGN(architectures.mnist("baseline"))
    logits, leaf = m.predict_logits(torch.rand(3, 784))
    assert logits.shape == (3, 10) and (leaf == 0).all()


def test_starved_node_is_reported_and_skipped():
    m = _model()
    x, y = _batch(1)
    res = m.forward(x, y, RoutingPolicy("eval"), tau=1.0)
    assert len(res.state.starved) == 1
    assert set(res.joints) == {0} | {n for n in (1, 2) if n not in res.state.starved}
    check_routing_invariants(res.state, m.tree, "eval")
