from dataclasses import replace

import numpy as np
import pytest

from pfl_lstr.federation import (FederationConfig, ServerState, aggregate, client_decoder_update,
                                 compose_personalized, fedavg_init, load_run, make_client,
                                 onboard_new_client, run_fedavg_baseline, run_local_baseline,
                                 run_round, run_training, save_run, select_clients,
                                 selected_encoder_update, train_epochs, train_local, with_rates)
from pfl_lstr.grad import ALL, DECODER, ENCODER, ParamSet, sgd_step
from pfl_lstr.lstr import init_model, loss_and_grads

from .conftest import SMALL_MEM, SMALL_MODEL, small_dataset

FED = FederationConfig(clients=3, rounds=2, decoder_epochs=2, encoder_epochs=1, encoder_lr=0.05,
                       fedavg_lr=0.05, decoder_lr=0.05, local_lr=0.05, select_fraction=0.5,
                       local_epochs=3, batch_size=4, seed=0)


def clients(n=3, seed=0, perms=None):
    perms = perms or [(0, 1, 2), (0, 2, 1), (0, 1, 2), (1, 0, 2)][:n]
    return [make_client(small_dataset(i, 12, seed, perms[i]), SMALL_MEM) for i in range(n)]


def vec(value):
    return ParamSet({"w": np.asarray(value, float)}, {"w": ENCODER})


class TestAggregate:
    def test_hand_weighted(self):
        out = aggregate([(0, vec([1.0]), 2), (1, vec([5.0]), 6)])
        assert abs(out["w"][0] - 4.0) <= 1e-15
        out = aggregate([(0, vec([1.0]), 1), (1, vec([3.0]), 3)])
        assert abs(out["w"][0] - 2.5) <= 1e-15
        out = aggregate([(0, vec([1.0]), 0), (1, vec([3.0]), 4)])
        assert abs(out["w"][0] - 3.0) <= 1e-15
        out = aggregate([(0, vec([2.0]), 1), (1, vec([6.0]), 1)])
        assert abs(out["w"][0] - 4.0) <= 1e-15

    def test_identical_candidates_bit_identical(self, rng):
        p = init_model(SMALL_MODEL, 3).subset(ENCODER)
        out = aggregate([(i, p.copy(), n) for i, n in enumerate((3, 7, 11))])
        assert out.equals(p)

    def test_single_candidate(self):
        p = init_model(SMALL_MODEL, 3)
        assert aggregate([(5, p, 9)]).equals(p)

    def test_within_bounds(self, rng):
        cands = [(i, vec(rng.normal(size=50)), int(rng.integers(1, 100))) for i in range(5)]
        out = aggregate(cands)["w"]
        stack = np.stack([c[1]["w"] for c in cands])
        assert (out >= stack.min(0)).all() and (out <= stack.max(0)).all()

    def test_order_independent(self, rng):
        cands = [(i, vec(rng.normal(size=8)), i + 1) for i in range(4)]
        assert aggregate(cands).equals(aggregate(cands[::-1]))

    def test_errors(self):
        with pytest.raises(ValueError):
            aggregate([])
        with pytest.raises(ValueError, match="shape"):
            aggregate([(0, vec([1.0]), 1), (1, vec([1.0, 2.0]), 1)])


class TestSelect:
    def server(self, k=4, seed=0):
        return ServerState(vec([0.0]), 0, {i: 10 for i in range(k)}, seed)

    def test_count_and_order(self):
        plan = select_clients(self.server(4), 0.5)
        assert len(plan.selected) == 2 and list(plan.selected) == sorted(plan.selected)
        assert plan.n_selected == 20

    def test_ceil_and_at_least_one(self):
        assert len(select_clients(self.server(3), 0.5).selected) == 2
        assert len(select_clients(self.server(3), 0.01).selected) == 1
        assert select_clients(self.server(3), 1.0).selected == (0, 1, 2)

    def test_deterministic_in_seed_and_round(self):
        s = self.server(10)
        assert select_clients(s, 0.3, 4) == select_clients(s, 0.3, 4)
        picks = {select_clients(s, 0.3, r).selected for r in range(1, 20)}
        assert len(picks) > 1


class TestWarmStart:
    def test_single_client_is_its_own_update(self):
        cs = clients(1)
        server, _ = fedavg_init(cs, FED, SMALL_MODEL)
        trained, _ = train_epochs(init_model(SMALL_MODEL, 0), SMALL_MODEL, cs[0].train, ALL,
                                  FED.fedavg_lr, FED.encoder_epochs, FED.batch_size,
                                  (0, 0, 0, 0))
        assert server.encoder.equals(trained.subset(ENCODER))
        assert cs[0].decoder.equals(trained.subset(DECODER))

    def test_identical_clients_share_result(self):
        a = clients(1)[0]
        twins = [replace(a, client_id=i) for i in range(3)]
        server, _ = fedavg_init(twins, FED, SMALL_MODEL)
        assert twins[0].decoder.equals(twins[2].decoder)
        assert server.registry == {0: 6, 1: 6, 2: 6}

    def test_duplicate_ids(self):
        a = clients(1)[0]
        with pytest.raises(ValueError, match="duplicate"):
            fedavg_init([a, a], FED, SMALL_MODEL)


class TestUpdates:
    def test_decoder_update_keeps_encoder(self):
        cs = clients(2)
        server, _ = fedavg_init(cs, FED, SMALL_MODEL)
        before = server.encoder.copy()
        dec, losses = client_decoder_update(cs[0], server.encoder, 2, 0.05, SMALL_MODEL, 4, (0,))
        assert server.encoder.equals(before) and len(losses) == 2
        assert set(dec.tags.values()) == {DECODER} and not dec.equals(cs[0].decoder)

    def test_encoder_update_keeps_decoder(self):
        cs = clients(2)
        server, _ = fedavg_init(cs, FED, SMALL_MODEL)
        before = cs[0].decoder.copy()
        enc, _ = selected_encoder_update(cs[0], server.encoder, cs[0].decoder, 1, 0.05,
                                         SMALL_MODEL, 4, (0,))
        assert cs[0].decoder.equals(before)
        assert set(enc.tags.values()) == {ENCODER} and not enc.equals(server.encoder)

    def test_zero_epochs_is_identity(self):
        c = clients(1)[0]
        p = init_model(SMALL_MODEL, 0)
        out, losses = train_epochs(p, SMALL_MODEL, c.train, DECODER, 0.1, 0, 4, (0,))
        assert out.equals(p) and losses == []

    def test_full_batch_epoch_is_one_sgd_step(self):
        c = clients(1)[0]
        p = init_model(SMALL_MODEL, 0)
        out, _ = train_epochs(p, SMALL_MODEL, c.train, ALL, 0.1, 1, 1000, (0,))
        _, g = loss_and_grads(p, SMALL_MODEL, c.train)
        ref = sgd_step(p, g, 0.1)
        for n in p:
            np.testing.assert_allclose(out[n], ref[n], rtol=0, atol=1e-12)


class TestRounds:
    def test_every_decoder_moves_each_round(self):
        cs = clients(3)
        server, _ = fedavg_init(cs, FED, SMALL_MODEL)
        before = {c.client_id: c.decoder.copy() for c in cs}
        records = run_round(server, cs, replace(FED, select_fraction=0.33), SMALL_MODEL, SMALL_MEM)
        assert server.round == 1
        for c in cs:
            assert not c.decoder.equals(before[c.client_id])
        assert [r["client"] for r in records] == [0, 1, 2, "server"]
        assert all(r["precision"] is not None for r in records[:3])

    def test_unselected_clients_do_not_shape_encoder(self):
        cs = clients(3)
        cfg = replace(FED, select_fraction=0.33)
        server, _ = fedavg_init(cs, cfg, SMALL_MODEL)
        plan = select_clients(server, cfg.select_fraction, 1)
        (chosen,) = plan.selected
        other = next(c for c in cs if c.client_id != chosen)
        mutated = replace(other, train=other.train.with_labels((other.train.labels + 1) % 3))
        s1, s2 = ServerState(server.encoder, 0, dict(server.registry), 0), \
            ServerState(server.encoder, 0, dict(server.registry), 0)
        cs1 = [replace(c) for c in cs]
        cs2 = [mutated if c.client_id == other.client_id else replace(c) for c in cs]
        run_round(s1, cs1, cfg, SMALL_MODEL)
        run_round(s2, cs2, cfg, SMALL_MODEL)
        assert s1.encoder.equals(s2.encoder)

    def test_single_client_round_equals_manual(self):
        cs = clients(1)
        server, _ = fedavg_init(cs, FED, SMALL_MODEL)
        phi = server.encoder
        dec, _ = client_decoder_update(cs[0], phi, FED.decoder_epochs, FED.decoder_lr,
                                       SMALL_MODEL, FED.batch_size, (0, 0, 1, 1))
        enc, _ = selected_encoder_update(cs[0], phi, dec, FED.encoder_epochs, FED.encoder_lr,
                                         SMALL_MODEL, FED.batch_size, (0, 0, 2, 1))
        run_round(server, cs, FED, SMALL_MODEL)
        assert server.encoder.equals(enc) and cs[0].decoder.equals(dec)

    def test_deterministic(self):
        a = run_training(FED, SMALL_MODEL, clients(3))
        b = run_training(FED, SMALL_MODEL, clients(3))
        assert a.encoder.equals(b.encoder) and a.log == b.log
        for cid in a.decoders:
            assert a.decoders[cid].equals(b.decoders[cid])

    def test_zero_rounds_is_warm_start(self):
        cs = clients(2)
        res = run_training(replace(FED, rounds=0), SMALL_MODEL, cs)
        server, _ = fedavg_init(clients(2), FED, SMALL_MODEL)
        assert res.encoder.equals(server.encoder) and res.server.round == 0

    def test_resume_bit_exact(self, tmp_path):
        cfg = replace(FED, rounds=4)
        straight = run_training(cfg, SMALL_MODEL, clients(3))
        cs = clients(3)
        run_training(replace(cfg, rounds=2), SMALL_MODEL, cs,
                     on_round=lambda s, c: save_run(tmp_path, s, c, cfg, SMALL_MODEL))
        fresh = clients(3)
        server, _, fed, model = load_run(tmp_path, fresh)
        assert server.round == 2 and fed == cfg and model == SMALL_MODEL
        resumed = run_training(cfg, SMALL_MODEL, fresh, server=server)
        assert resumed.encoder.equals(straight.encoder)
        for cid in straight.decoders:
            assert resumed.decoders[cid].equals(straight.decoders[cid])
        assert resumed.log == straight.log[-len(resumed.log):]


class TestBaselines:
    def test_single_client_fedavg_equals_local(self):
        cfg = replace(FED, rounds=3, local_epochs=3)
        cs = clients(1)
        fed = run_fedavg_baseline(cfg, SMALL_MODEL, cs)
        local, _ = train_local(cs[0], cfg, SMALL_MODEL)
        assert fed.encoder.merge(fed.decoders[0]).equals(local)

    def test_local_isolation(self):
        cs = clients(3)
        res = run_local_baseline(FED, SMALL_MODEL, cs)
        cs2 = clients(3)
        cs2[1] = replace(cs2[1], train=cs2[1].train.with_labels((cs2[1].train.labels + 1) % 3))
        res2 = run_local_baseline(FED, SMALL_MODEL, cs2)
        assert res[0][0].equals(res2[0][0]) and res[2][0].equals(res2[2][0])
        assert not res[1][0].equals(res2[1][0])

    def test_fedavg_shares_one_model(self):
        res = run_fedavg_baseline(replace(FED, rounds=1), SMALL_MODEL, clients(2))
        assert res.decoders[0].equals(res.decoders[1])


class TestPersonalization:
    def test_onboarding_leaves_encoder_alone(self):
        res = run_training(FED, SMALL_MODEL, clients(3))
        phi = res.encoder.copy()
        newcomer = make_client(small_dataset(7, 12, 1, (1, 2, 0)), SMALL_MEM)
        dec = onboard_new_client(res.encoder, newcomer, 3, SMALL_MODEL, 0.05, 4, 0)
        assert res.encoder.equals(phi) and set(dec.tags.values()) == {DECODER}

    def test_onboarding_zero_epochs_is_fresh_init(self):
        from pfl_lstr.lstr import init_decoder
        newcomer = make_client(small_dataset(7, 12, 1), SMALL_MEM)
        enc = init_model(SMALL_MODEL, 0).subset(ENCODER)
        assert onboard_new_client(enc, newcomer, 0, SMALL_MODEL, 0.05, 4, 5).equals(
            init_decoder(SMALL_MODEL, 5))

    def test_cross_pairing(self):
        res = run_training(FED, SMALL_MODEL, clients(3))
        m = compose_personalized(res.decoders[1], res.encoder)
        assert m.params.subset(DECODER).equals(res.decoders[1])
        assert res.personalized(2).params.subset(DECODER).equals(res.decoders[2])
        with pytest.raises(ValueError):
            compose_personalized(res.encoder, res.decoders[1])


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(rounds=-1), dict(select_fraction=0.0),
                                    dict(select_fraction=1.5), dict(batch_size=0),
                                    dict(encoder_lr=0.0), dict(clients=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            FederationConfig(**kw)

    def test_rate_presets(self):
        cfg = with_rates(FederationConfig(), "desk-rates")
        assert cfg.encoder_lr == cfg.decoder_lr == 0.05
        with pytest.raises(ValueError):
            with_rates(cfg, "fast")
