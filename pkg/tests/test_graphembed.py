from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import by_key, movie_db, random_database
from relembed import GraphEmbedder
from relembed.errors import DimensionMismatch, MissingEmbedding, NotFound, ParseError
from relembed.evaluation import make_synthetic_db
from relembed.graphembed import (GraphHyperparams, _batch_sgns, build_db_graph, delete_fact_node,
                                 extend_graph_model, fact_embedding, generate_walks, init_sgns, load_model,
                                 noise_distribution, save_model, sgns_loss, skipgram_pairs,
                                 train_graph_embedding, train_sgns)
from relembed.relational import AttributeSchema, Database, Fact, ForeignKey, RelationSchema, Schema


def one_relation_db(n_attrs, rows):
    names = [f"A{i}" for i in range(n_attrs)]
    schema = Schema([RelationSchema("R", [AttributeSchema(a) for a in names], names[:1])])
    db = Database(schema)
    db.insert_facts([Fact("R", r) for r in rows])
    return db


def hp(**kw):
    base = dict(dim=8, walks_per_node=4, steps_per_walk=8, window=2, negatives=3, batch_size=512, epochs=2,
                dynamic_epochs=2, learning_rate=0.05, seed=0)
    base.update(kw)
    return GraphHyperparams(**base)


def assert_bipartite(graph):
    for u, nbs in enumerate(graph.adj):
        for v in nbs:
            assert graph.is_fact_node(u) != graph.is_fact_node(v)
            assert u in graph.adj[v]


# ---- graph construction -----------------------------------------------------

def test_single_fact_graph():
    g = build_db_graph(one_relation_db(2, [("a", "b")]))
    assert g.n_nodes == 3
    assert len(g.edges()) == 2
    assert_bipartite(g)


def test_null_has_no_node():
    g = build_db_graph(one_relation_db(3, [("a", None, "c")]))
    assert g.n_nodes == 3


def test_fk_identification_on_movies():
    db = movie_db()
    g = build_db_graph(db)
    # s01 is referenced by no movie, so only the Studios side carries it
    assert ("Movies", "studio", "s01") not in g.triple_node
    assert g.triple_node[("Movies", "studio", "s02")] == g.triple_node[("Studios", "sid", "s02")]
    assert g.triple_node[("Collaborations", "actor1", "a01")] == g.triple_node[("Actors", "aid", "a01")]
    assert g.triple_node[("Collaborations", "actor2", "a01")] == g.triple_node[("Actors", "aid", "a01")]
    assert_bipartite(g)


def test_same_text_without_fk_stays_distinct():
    db = movie_db()
    db.insert_facts([Fact("Movies", ("m90", "Universal", "Drama", 1.0, "s01")),
                     Fact("Movies", ("m91", "Universal", "Drama", 2.0, "s02"))])
    g = build_db_graph(db)
    assert g.triple_node[("Movies", "title", "Universal")] != g.triple_node[("Studios", "sname", "Universal")]
    # both titles share one node
    m90, m91 = by_key(db, "Movies", "m90"), by_key(db, "Movies", "m91")
    t = g.triple_node[("Movies", "title", "Universal")]
    assert t in g.adj[g.fact_nodes[m90.fact_id]] and t in g.adj[g.fact_nodes[m91.fact_id]]


def closure_oracle(db):
    """Connected components of raw triples under per-position FK identification, by BFS."""
    triples = set()
    for f in db.by_id.values():
        rel = db.schema[f.relation]
        for a, v in zip(rel.attribute_names, f.values):
            if v is not None:
                triples.add((f.relation, a, v))
    nbrs = {t: set() for t in triples}
    for fk in db.schema.foreign_keys:
        for b, c in zip(fk.source_attrs, fk.target_attrs):
            for (r, a, v) in triples:
                if (r, a) == (fk.source_relation, b) and (fk.target_relation, c, v) in triples:
                    nbrs[(r, a, v)].add((fk.target_relation, c, v))
                    nbrs[(fk.target_relation, c, v)].add((r, a, v))
    comp, label = {}, 0
    for t in sorted(triples, key=repr):
        if t in comp:
            continue
        stack = [t]
        while stack:
            x = stack.pop()
            if x in comp:
                continue
            comp[x] = label
            stack.extend(nbrs[x])
        label += 1
    return comp


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_identification_matches_closure_oracle(seed):
    db = random_database(seed, max_facts=50)
    g = build_db_graph(db)
    comp = closure_oracle(db)
    assert set(comp) == set(g.triple_node)
    ts = sorted(comp, key=repr)
    for i, a in enumerate(ts):
        for b in ts[i + 1:]:
            assert (comp[a] == comp[b]) == (g.triple_node[a] == g.triple_node[b])
    assert_bipartite(g)
    assert len(g.fact_nodes) == len(db.by_id)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000))
def test_incremental_build_matches_closure(seed):
    db = random_database(seed, max_facts=50)
    facts = sorted(db.by_id.values(), key=lambda f: f.fact_id)
    g = build_db_graph(Database(db.schema))
    half = len(facts) // 2
    g.add_facts(facts[:half])
    g.add_facts(facts[half:])
    comp = closure_oracle(db)
    ts = sorted(comp, key=repr)
    for i, a in enumerate(ts):
        for b in ts[i + 1:]:
            assert (comp[a] == comp[b]) == (g.triple_node[a] == g.triple_node[b])
    assert_bipartite(g)


def test_exclude_drops_attribute():
    db = movie_db()
    g = build_db_graph(db, exclude=[("Movies", "genre")])
    assert not any(t[:2] == ("Movies", "genre") for t in g.triple_node)


# ---- walks --------------------------------------------------------------------

def test_isolated_node_gives_singleton_walks():
    g2 = build_db_graph(one_relation_db(1, [("a",)]))
    # fact node plus value node; kill the value node's edge to isolate the fact node
    fnode = next(iter(g2.fact_nodes.values()))
    vnode = next(iter(g2.adj[fnode]))
    g2.adj[fnode].clear()
    g2.adj[vnode].clear()
    walks = generate_walks(g2, hp(walks_per_node=7), np.random.default_rng(0), start_nodes=[fnode])
    assert walks.shape == (7, 8)
    assert (walks[:, 0] == fnode).all() and (walks[:, 1:] == -1).all()


def test_walks_follow_edges_and_start_nodes():
    db, _ = make_synthetic_db(facts_per_class=5, items_per_class=4, seed=1)
    g = build_db_graph(db)
    walks = generate_walks(g, hp(p=0.5, q=2.0), np.random.default_rng(0))
    starts = g.alive_nodes()
    assert (walks[:len(starts), 0] == starts).all()
    for w in walks[:200]:
        w = w[w >= 0]
        for a, b in zip(w[:-1], w[1:]):
            assert b in g.adj[a]


def test_uniform_transitions_when_p_q_one():
    db, _ = make_synthetic_db(facts_per_class=10, items_per_class=4, seed=2)
    g = build_db_graph(db)
    node = max(range(g.n_nodes), key=lambda n: len(g.adj[n]))
    nbs = sorted(g.adj[node])
    walks = generate_walks(g, hp(walks_per_node=400, steps_per_walk=30), np.random.default_rng(3))
    nxt = Counter()
    for w in walks:
        for i in range(1, len(w) - 1):
            if w[i] == node and w[i + 1] >= 0:
                nxt[int(w[i + 1])] += 1
    total = sum(nxt.values())
    assert total >= 10_000
    tv = 0.5 * sum(abs(nxt[n] / total - 1 / len(nbs)) for n in nbs)
    assert tv < 0.02


def test_huge_p_never_returns_on_path():
    db = one_relation_db(2, [("x", "y")])
    g = build_db_graph(db)
    fnode = next(iter(g.fact_nodes.values()))
    x, y = g.triple_node[("R", "A0", "x")], g.triple_node[("R", "A1", "y")]
    walks = generate_walks(g, hp(walks_per_node=2000, steps_per_walk=3, p=1e9, q=1.0), np.random.default_rng(0),
                           start_nodes=[x])
    assert (walks[:, 1] == fnode).all()
    assert (walks[:, 2] == y).mean() > 0.999


def test_bias_law_matches_second_order_formula():
    # star around one fact: arriving from x, weights are 1/p for x and 1/q for y, z
    db = one_relation_db(3, [("x", "y", "z")])
    g = build_db_graph(db)
    x, y, z = (g.triple_node[("R", f"A{i}", v)] for i, v in enumerate("xyz"))
    p, q = 2.0, 0.5
    walks = generate_walks(g, hp(walks_per_node=20_000, steps_per_walk=3, p=p, q=q), np.random.default_rng(1),
                           start_nodes=[x])
    w = np.array([1 / p, 1 / q, 1 / q])
    want = w / w.sum()
    emp = np.array([(walks[:, 2] == n).mean() for n in (x, y, z)])
    assert np.abs(emp - want).max() < 0.015


# ---- SGNS ---------------------------------------------------------------------

def central_diff(fn, arr, h=1e-5):
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        up = fn()
        arr[idx] = old - h
        down = fn()
        arr[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_sgns_single_pair_gradient(seed, d):
    rng = np.random.default_rng(seed)
    u, vp, vn = rng.normal(size=d), rng.normal(size=d), rng.normal(size=(3, d))
    f = lambda: sgns_loss(u, vp, vn)[0]
    _, gu, gvp, gvn = sgns_loss(u, vp, vn)
    assert rel_err(gu, central_diff(f, u)) < 1e-4
    assert rel_err(gvp, central_diff(f, vp)) < 1e-4
    assert rel_err(gvn, central_diff(f, vn)) < 1e-4


def test_sgns_batch_gradient_on_five_nodes():
    rng = np.random.default_rng(0)
    win, wout = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    walks = np.array([[0, 1, 2, 3, 4], [4, 2, 0, 1, 3]])
    pairs = skipgram_pairs(walks, 2)
    negs = rng.integers(5, size=(len(pairs), 3))
    f = lambda: _batch_sgns(win, wout, pairs[:, 0], pairs[:, 1], negs)[0]
    _, gin, gout = _batch_sgns(win, wout, pairs[:, 0], pairs[:, 1], negs)
    assert rel_err(gin, central_diff(f, win)) < 1e-4
    assert rel_err(gout, central_diff(f, wout)) < 1e-4


def test_skipgram_pairs_window():
    pairs = skipgram_pairs(np.array([[0, 1, 2, -1]]), 1)
    assert sorted(map(tuple, pairs.tolist())) == [(0, 1), (1, 0), (1, 2), (2, 1)]


def test_noise_distribution_exponent():
    walks = np.array([[0, 0, 0, 0, 1]])
    p = noise_distribution(walks, 3)
    assert p == pytest.approx(np.array([4 ** 0.75, 1, 0]) / (4 ** 0.75 + 1))
    p2 = noise_distribution(walks, 3, alive=[True, False, True])
    assert p2[1] == 0.0 and p2[0] == 1.0


def test_zero_epochs_and_all_frozen_leave_model():
    walks = np.array([[0, 1, 2, 3, 4]] * 4)
    m = init_sgns(5, hp(), np.random.default_rng(0))
    before = (m.in_vectors.tobytes(), m.out_vectors.tobytes())
    train_sgns(walks, m, hp(), np.random.default_rng(1), epochs=0)
    assert (m.in_vectors.tobytes(), m.out_vectors.tobytes()) == before
    m.frozen = set(range(5))
    train_sgns(walks, m, hp(), np.random.default_rng(1), epochs=3)
    assert (m.in_vectors.tobytes(), m.out_vectors.tobytes()) == before


def test_corpus_beyond_model():
    m = init_sgns(3, hp(), np.random.default_rng(0))
    with pytest.raises(DimensionMismatch):
        train_sgns(np.array([[0, 5]]), m, hp(), np.random.default_rng(0))


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_two_cliques_separate():
    rng = np.random.default_rng(0)
    walks = []
    for base in (0, 6):
        for _ in range(300):
            walks.append(base + rng.integers(6, size=10))
    walks = np.array(walks)
    h = hp(dim=16, window=3, negatives=5, epochs=5, batch_size=256)
    m = init_sgns(12, h, np.random.default_rng(1))
    train_sgns(walks, m, h, np.random.default_rng(2))
    v = m.in_vectors
    intra = np.mean([cos(v[i], v[j]) for c in (0, 6) for i in range(c, c + 6) for j in range(c, c + 6) if i < j])
    inter = np.mean([cos(v[i], v[j]) for i in range(6) for j in range(6, 12)])
    assert intra > inter + 0.5
    assert m.loss_history[-1] < m.loss_history[0]


def test_training_is_deterministic():
    db, _ = make_synthetic_db(facts_per_class=6, items_per_class=4, seed=3)
    g1, m1 = train_graph_embedding(db, hp())
    g2, m2 = train_graph_embedding(db, hp())
    assert m1.in_vectors.tobytes() == m2.in_vectors.tobytes()
    assert g1.node_keys == g2.node_keys


# ---- extension ------------------------------------------------------------------

def split_synth(n_new=1, seed=4):
    db, _ = make_synthetic_db(facts_per_class=8, items_per_class=4, seed=seed)
    ents = sorted(db.relation_facts("Entity"), key=lambda f: f.fact_id)[:n_new]
    groups = [db.cascade_delete(f, protected=["Entity"]) for f in ents]
    return db, groups


def test_zero_new_facts_unchanged():
    db, _ = split_synth()
    g, m = train_graph_embedding(db, hp())
    g2, m2 = extend_graph_model(db, g, m, [], hp(), np.random.default_rng(0))
    assert g2.node_keys == g.node_keys and g2.edges() == g.edges()
    assert m2.in_vectors.tobytes() == m.in_vectors.tobytes()


def test_new_fact_with_known_values_adds_one_node():
    db, _ = split_synth()
    g, m = train_graph_embedding(db, hp())
    # a link between an existing entity and an existing item it does not link to yet
    ent = db.relation_facts("Entity")[0]
    linked = {l.values[1] for l in db.relation_facts("Link") if l.values[0] == ent.values[0]}
    item = next(i for i in db.relation_facts("Item") if i.values[0] not in linked)
    new = db.insert_facts([Fact("Link", (ent.values[0], item.values[0]))])
    g2, m2 = extend_graph_model(db, g, m, new, hp(), np.random.default_rng(0))
    assert g2.n_nodes == g.n_nodes + 1
    assert_bipartite(g2)


@pytest.mark.parametrize("n_new", [1, 3])
def test_extension_freezes_old_nodes(n_new):
    db, groups = split_synth(n_new)
    g, m = train_graph_embedding(db, hp())
    old_in, old_out = m.in_vectors.copy(), m.out_vectors.copy()
    batch = [f for grp in reversed(groups) for f in grp]
    stored = db.insert_facts(batch)
    g2, m2 = extend_graph_model(db, g, m, stored, hp(), np.random.default_rng(0))
    n_old = g.n_nodes
    alive_old = [i for i in range(n_old) if g.alive[i]]
    assert m2.in_vectors[alive_old].tobytes() == old_in[alive_old].tobytes()
    assert m2.out_vectors[alive_old].tobytes() == old_out[alive_old].tobytes()
    assert m.in_vectors.tobytes() == old_in.tobytes()  # not in place
    assert not np.array_equal(m2.in_vectors[n_old:], np.zeros_like(m2.in_vectors[n_old:]))
    assert_bipartite(g2)
    for f in stored:
        assert fact_embedding(m2, g2, f.fact_id).shape == (8,)


def test_bridging_fact_is_closer_to_neighbours():
    # two components of value/fact nodes, joined by a new fact sharing one value with each
    names = ["k", "a", "b"]
    schema = Schema([RelationSchema("R", [AttributeSchema(a) for a in names], ["k"])])
    db = Database(schema)
    rows = [(f"l{i}", f"x{i % 3}", f"y{i % 3}") for i in range(12)] + \
           [(f"r{i}", f"u{i % 3}", f"w{i % 3}") for i in range(12)]
    db.insert_facts([Fact("R", r) for r in rows])
    h = hp(dim=16, walks_per_node=20, steps_per_walk=10, window=3, negatives=5, epochs=5, dynamic_epochs=20,
           dynamic_batch_size=64)
    g, m = train_graph_embedding(db, h)
    new = db.insert_facts([Fact("R", ("bridge", "x0", "u0"))])
    g2, m2 = extend_graph_model(db, g, m, new, h, np.random.default_rng(0))
    v = fact_embedding(m2, g2, new[0].fact_id)
    nb = [g2.triple_node[("R", "a", "x0")], g2.triple_node[("R", "a", "u0")]]
    far = [g2.triple_node[("R", "b", "y2")], g2.triple_node[("R", "b", "w2")]]
    # skip-gram places a node's in-vector near its contexts' out-vectors
    near_score = np.mean([cos(v, m2.out_vectors[n]) for n in nb])
    far_score = np.mean([cos(v, m2.out_vectors[n]) for n in far])
    assert near_score > far_score


def test_merge_of_two_old_value_nodes_is_recorded():
    schema = Schema([RelationSchema("T", [AttributeSchema("x")], ["x"]),
                     RelationSchema("U", [AttributeSchema("y")], ["y"]),
                     RelationSchema("S", [AttributeSchema("s"), AttributeSchema("p")], ["s"])],
                    [ForeignKey("S", ["p"], "T", ["x"]), ForeignKey("S", ["p"], "U", ["y"])])
    db = Database(schema)
    db.insert_facts([Fact("T", ("v",)), Fact("U", ("v",))])
    g, m = train_graph_embedding(db, hp())
    tnode, unode = g.triple_node[("T", "x", "v")], g.triple_node[("U", "y", "v")]
    assert tnode != unode
    new = db.insert_facts([Fact("S", ("s1", "v"))])
    g2, m2 = extend_graph_model(db, g, m, new, hp(), np.random.default_rng(0))
    assert g2.triple_node[("T", "x", "v")] == g2.triple_node[("U", "y", "v")] == g2.triple_node[("S", "p", "v")]
    assert g2.warnings
    survivor = g2.triple_node[("T", "x", "v")]
    assert m2.in_vectors[survivor].tobytes() == m.in_vectors[survivor].tobytes()
    assert_bipartite(g2)


def test_fact_embedding_lookup_and_delete():
    db, _ = split_synth()
    g, m = train_graph_embedding(db, hp())
    fid = db.relation_facts("Entity")[0].fact_id
    a, b = fact_embedding(m, g, fid), fact_embedding(m, g, fid)
    assert a.shape == (8,) and np.array_equal(a, b)
    delete_fact_node(g, fid)
    with pytest.raises(NotFound):
        fact_embedding(m, g, fid)
    with pytest.raises(NotFound):
        delete_fact_node(g, fid)


# ---- persistence and estimator -----------------------------------------------

def test_save_load_round_trip(tmp_path):
    db, _ = split_synth()
    g, m = train_graph_embedding(db, hp())
    save_model(g, m, hp(), tmp_path / "g.json", db.schema.digest())
    g2, m2, h2 = load_model(tmp_path / "g.json", db)
    assert h2 == hp()
    assert g2.node_keys == g.node_keys
    assert m2.in_vectors.tobytes() == m.in_vectors.tobytes()
    assert m2.out_vectors.tobytes() == m.out_vectors.tobytes()
    assert np.array_equal(m2.counts, m.counts)


def test_load_against_other_database_fails(tmp_path):
    db, _ = split_synth()
    g, m = train_graph_embedding(db, hp())
    save_model(g, m, hp(), tmp_path / "g.json")
    with pytest.raises(ParseError):
        load_model(tmp_path / "g.json", movie_db())
    (tmp_path / "bad.json").write_text('{"format": "nope"}')
    with pytest.raises(ParseError):
        load_model(tmp_path / "bad.json", db)


@pytest.mark.parametrize("mode", ["one_by_one", "all_at_once"])
def test_estimator_extend_is_stable(mode):
    db, groups = split_synth(3)
    est = GraphEmbedder(target_relation="Entity", exclude=[("Entity", "label")], dim=8, walks_per_node=4,
                        steps_per_walk=8, window=2, negatives=3, epochs=2, dynamic_epochs=2, learning_rate=0.05)
    X = est.fit_transform(db)
    assert X.shape == (len(db.relation_facts("Entity")), 8)
    snap = est.snapshot()
    batch = [f for grp in reversed(groups) for f in grp]
    stored = db.insert_facts(batch)
    out = est.extend(db, stored, mode=mode)
    assert len(out) == 3
    after = est.snapshot()
    assert all(after[k] == v for k, v in snap.items())
    fid = next(iter(out))
    assert est.delete(fid) is not None and est.delete(fid) is None
    with pytest.raises(MissingEmbedding):
        est.transform([fid])


def test_estimator_save_load(tmp_path):
    db, _ = split_synth()
    est = GraphEmbedder(target_relation="Entity", dim=4, walks_per_node=2, steps_per_walk=5, epochs=1).fit(db)
    est.save(tmp_path / "g.json", db)
    back = GraphEmbedder.load(tmp_path / "g.json", db, target_relation="Entity")
    assert np.array_equal(back.transform(db), est.transform(db))
    assert back.get_params()["dim"] == 4
