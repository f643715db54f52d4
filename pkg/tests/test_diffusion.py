import math

import numpy as np
import pytest
import torch

from armswap import checkpoint
from armswap.config import DiffusionConfig, VaeConfig
from armswap.diffusion import (
    Denoiser,
    LatentVideo,
    PromptTable,
    adapter_parameters,
    apply_lora,
    base_state,
    build_vae,
    ddpm_step,
    diffusion_loss,
    encode_prompt,
    finetune_adapters,
    load_denoiser,
    load_vae,
    make_schedule,
    merge_lora,
    q_sample,
    sample,
    sampling_timesteps,
    train_diffusion,
    train_vae,
    vae_decode,
    vae_encode,
)
from armswap.diffusion.denoiser import LoRAConv1x1, LoRALinear
from armswap.datagen import read_clip, swap_environment
from armswap.diffusion.train import build_latent_pool, read_log
from armswap.diffusion.vae import collect_frames
from armswap.errors import InvalidArgument
from armswap.video import VideoTensor


def tiny_dcfg(**kw):
    base = dict(width=16, n_blocks=1, cond_dim=8, steps=6, batch_size=2, checkpoint_every=3, log_every=1,
                reference_variants=1, T=100)
    base.update(kw)
    return DiffusionConfig(**base)


@pytest.fixture(scope="module")
def tiny_vae():
    return build_vae(VaeConfig(width=8), seed=0)


@pytest.fixture(scope="module")
def tiny_pool(tiny_root, tiny_vae):
    return build_latent_pool([tiny_root / "A", tiny_root / "B"], tiny_vae, tiny_dcfg())


# ---- schedule


def test_linear_schedule_alpha_bar_T():
    s = make_schedule(1000, 1e-4, 0.02, "linear")
    oracle = 1.0
    for b in np.linspace(1e-4, 0.02, 1000):
        oracle *= 1 - b
    assert abs(s.alpha_bar(1000) - oracle) <= 1e-12
    assert abs(s.alpha_bar(1000) - 4.0e-5) <= 0.2 * 4.0e-5
    assert s.alpha_bar(0) == 1.0
    assert np.all(np.diff(s.alpha_bars) < 0)


def test_two_step_schedule_by_hand():
    s = make_schedule(2, 0.5, 0.5)
    assert s.alpha_bars.tolist() == [0.5, 0.25]
    _, beta, var = s.step_coefficients(2)
    assert beta == 0.5 and abs(var - 1 / 3) <= 1e-9
    assert make_schedule(2, 0.5, 0.5, sigma_mode="beta").step_coefficients(2)[2] == 0.5


@pytest.mark.parametrize("args", [(1000, 1e-4, 1.0), (1000, 1e-4, 1.5), (1, 1e-4, 0.02), (10, 0.0, 0.02),
                                  (10, 0.03, 0.02)])
def test_schedule_bounds(args):
    with pytest.raises(InvalidArgument):
        make_schedule(*args)


def test_cosine_schedule_monotone():
    s = make_schedule(1000, 1e-4, 0.02, "cosine")
    assert np.all(np.diff(s.alpha_bars) < 0) and s.alpha_bar(1000) < 0.05


def test_q_sample_scalar():
    s = make_schedule(2, 0.5, 0.5)
    z = q_sample(torch.tensor([1.0], dtype=torch.float64), 2, torch.tensor([2.0], dtype=torch.float64), s)
    assert abs(z.item() - 2.2320508) <= 1e-6
    with pytest.raises(InvalidArgument):
        q_sample(torch.ones(1), 3, torch.ones(1), s)
    with pytest.raises(InvalidArgument):
        q_sample(torch.ones(1), 0, torch.ones(1), s)


def test_q_sample_t1_limit(rng):
    s = make_schedule(1000, 1e-4, 0.02)
    z0 = torch.tensor(rng.normal(size=100))
    eps = torch.tensor(rng.normal(size=100))
    z1 = q_sample(z0, 1, eps, s)
    b1 = s.betas[0]
    bound = math.sqrt(b1) * eps.abs() + (1 - math.sqrt(1 - b1)) * z0.abs() + 1e-12
    assert ((z1 - z0).abs() <= bound).all()


def test_q_sample_matches_iterated_transitions():
    s = make_schedule(1000, 1e-4, 0.02)
    n, t, z0 = 100_000, 60, 1.5
    gen = np.random.default_rng(0)
    z = np.full(n, z0)
    for k in range(1, t + 1):
        b = s.betas[k - 1]
        z = math.sqrt(1 - b) * z + math.sqrt(b) * gen.normal(size=n)
    ab = s.alpha_bar(t)
    mean, var = math.sqrt(ab) * z0, 1 - ab
    assert abs(z.mean() - mean) <= 3 * math.sqrt(var / n)
    assert abs(z.var() - var) <= 3 * var * math.sqrt(2 / (n - 1))
    closed = q_sample(torch.full((n,), z0, dtype=torch.float64), t, torch.tensor(gen.normal(size=n)), s).numpy()
    assert abs(closed.mean() - mean) <= 3 * math.sqrt(var / n)
    assert abs(closed.var() - var) <= 3 * var * math.sqrt(2 / (n - 1))


def test_q_sample_per_batch_t():
    s = make_schedule(100, 1e-4, 0.02)
    z0 = torch.ones(3, 2, 2, dtype=torch.float64)
    eps = torch.zeros_like(z0)
    z = q_sample(z0, torch.tensor([1, 50, 100]), eps, s)
    for i, t in enumerate((1, 50, 100)):
        assert torch.allclose(z[i], torch.full((2, 2), math.sqrt(s.alpha_bar(t)), dtype=torch.float64))


def test_ddpm_step_inverts_closed_form_at_t1(rng):
    s = make_schedule(1000, 1e-4, 0.02)
    z0 = torch.tensor(rng.normal(size=(4, 5)))
    eps = torch.tensor(rng.normal(size=(4, 5)))
    z1 = q_sample(z0, 1, eps, s)
    noise = torch.tensor(rng.normal(size=(4, 5)))
    rec = ddpm_step(z1, eps, 1, s, noise=noise)
    assert (rec - z0).abs().max().item() <= 1e-5


def test_zero_sigma_trajectory_is_rescaling():
    s = make_schedule(50, 1e-4, 0.02)
    z = torch.tensor([0.3], dtype=torch.float64)
    oracle = 0.3
    for t in range(50, 0, -1):
        z = ddpm_step(z, torch.zeros_like(z), t, s, noise=None)
        oracle /= math.sqrt(s.alphas[t - 1])
    assert abs(z.item() - oracle) <= 1e-9


def test_ddpm_step_noise_scale():
    s = make_schedule(2, 0.5, 0.5)
    z = torch.zeros(1, dtype=torch.float64)
    out = ddpm_step(z, torch.zeros_like(z), 2, s, noise=torch.ones(1, dtype=torch.float64))
    assert abs(out.item() - math.sqrt(1 / 3)) <= 1e-9
    with pytest.raises(InvalidArgument):
        ddpm_step(z, z, 3, s)
    with pytest.raises(InvalidArgument):
        ddpm_step(z, z, 2, s, t_prev=2)


def test_strided_timesteps():
    assert sampling_timesteps(1000, 1000) == list(range(1000, 0, -1))
    ts = sampling_timesteps(1000, 50)
    assert len(ts) == 50 and ts[0] == 1000 and ts[-1] == 1 and ts == sorted(ts, reverse=True)
    assert sampling_timesteps(10, 50) == list(range(10, 0, -1))


def test_schedule_roundtrip():
    s = make_schedule(10, 1e-3, 0.1)
    s2 = type(s).from_dict(s.to_dict())
    assert np.array_equal(s.alpha_bars, s2.alpha_bars) and s2.sigma_mode == s.sigma_mode


# ---- VAE


def test_vae_shapes_and_determinism(tiny_vae, rng):
    clip = VideoTensor(rng.uniform(size=(16, 3, 64, 64)).astype(np.float32))
    z = vae_encode(tiny_vae, clip)
    assert z.shape == (16, 16, 8, 8)
    assert torch.equal(z.data, vae_encode(tiny_vae, clip).data)
    out = vae_decode(tiny_vae, z)
    assert out.data.shape == clip.data.shape and out.data.min() >= 0 and out.data.max() <= 1
    with pytest.raises(InvalidArgument):
        vae_encode(tiny_vae, VideoTensor(np.zeros((2, 3, 60, 64), np.float32)))
    with pytest.raises(InvalidArgument):
        vae_decode(tiny_vae, torch.zeros(16, 8, 8))


def test_train_vae_determinism_resume_and_kl(tiny_root, tmp_path):
    cfg = VaeConfig(width=8, epochs=3, batch_size=8, max_frames=48, checkpoint_every=1, kl_weight=0.0)
    dirs = [tiny_root / "A", tiny_root / "B"]
    train_vae(dirs, cfg, tmp_path / "a")
    train_vae(dirs, cfg, tmp_path / "b", max_epochs=1)
    train_vae(dirs, cfg, tmp_path / "b", resume=tmp_path / "b" / "ckpt_epoch_0001.pt")
    la = read_log(tmp_path / "a" / "losses.csv")
    lb = read_log(tmp_path / "b" / "losses.csv")
    strip = lambda rows: [{k: v for k, v in r.items() if k != "seconds"} for r in rows]  # noqa: E731
    assert len(la) == 3 and strip(la) == strip(lb)
    for r in la:
        assert r["total"] == pytest.approx(r["recon"]) and r["kl"] >= 0
    assert la[-1]["recon"] < la[0]["recon"]
    v = load_vae(tmp_path / "a" / "last.pt")
    assert v.latent_scale.item() > 0
    assert checkpoint.state_hash(v) == checkpoint.state_hash(load_vae(tmp_path / "b" / "last.pt"))


# ---- prompts


def test_prompt_table():
    table = PromptTable(8)
    assert torch.equal(encode_prompt(table, []), torch.zeros(8))
    a = encode_prompt(table, ["arm_B", "pick_lift"])
    assert torch.equal(a, encode_prompt(table, ["arm_B", "pick_lift"]))
    assert torch.allclose(a, (table.embed.weight[1] + table.embed.weight[3]) / 2)
    with pytest.raises(InvalidArgument, match="arm_C"):
        encode_prompt(table, ["arm_C", "reach"])


# ---- denoiser


def _latents(b=2, c=16, n=4, h=4, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(b, c, n, h, h, generator=g, dtype=dtype), torch.randn(b, c, n, h, h, generator=g, dtype=dtype)


def test_denoiser_zero_init_and_contract():
    m = Denoiser(width=16, n_blocks=2, cond_dim=8, T=100)
    z, r = _latents()
    out = m(z, r, torch.zeros(2, 8), torch.tensor([3, 90]))
    assert out.shape == z.shape and torch.all(out == 0)
    with torch.no_grad():
        m.out.weight.normal_()
    out = m(z, r, torch.zeros(8), 5)
    assert torch.isfinite(out).all() and out.abs().sum() > 0
    with pytest.raises(InvalidArgument):
        m(z, r[:, :, :3], torch.zeros(8), 5)
    with pytest.raises(InvalidArgument):
        m(z, r, torch.zeros(8), 101)
    with pytest.raises(InvalidArgument):
        m(z[:, :8], r[:, :8], torch.zeros(8), 5)


def test_frame_permutation_equivariance_without_temporal():
    m = Denoiser(width=16, n_blocks=2, cond_dim=8, temporal=False, T=100)
    with torch.no_grad():
        m.out.weight.normal_()
    z, r = _latents(n=5)
    d = torch.randn(8)
    perm = torch.tensor([3, 0, 4, 1, 2])
    out = m(z, r, d, 7)
    out_p = m(z[:, :, perm], r[:, :, perm], d, 7)
    assert torch.allclose(out[:, :, perm], out_p, atol=1e-6)
    mt = Denoiser(width=16, n_blocks=2, cond_dim=8, temporal=True, T=100)
    with torch.no_grad():
        mt.out.weight.normal_()
    assert not torch.allclose(mt(z, r, d, 7)[:, :, perm], mt(z[:, :, perm], r[:, :, perm], d, 7), atol=1e-6)


def test_zero_reference_ignores_reference():
    m = Denoiser(width=16, n_blocks=1, cond_dim=8, zero_reference=True, T=100)
    with torch.no_grad():
        m.out.weight.normal_()
    z, r = _latents()
    assert torch.equal(m(z, r, torch.zeros(8), 5), m(z, torch.randn_like(r), torch.zeros(8), 5))


# ---- loss


class ZeroModel(torch.nn.Module):
    def forward(self, z_t, z_ref, d_c, t):
        return torch.zeros_like(z_t)


def test_loss_zero_and_oracle_denoisers():
    s = make_schedule(100, 1e-4, 0.02)
    z0, ref = _latents(b=4, n=8, h=8)
    eps = torch.randn(z0.shape, generator=torch.Generator().manual_seed(1))
    assert z0.numel() >= 10_000
    t = torch.tensor([1, 20, 60, 100])
    loss = diffusion_loss(ZeroModel(), z0, ref, torch.zeros(8), s, t, eps)
    assert abs(loss.item() - 1.0) <= 0.05

    class Oracle(torch.nn.Module):
        def forward(self, z_t, z_ref, d_c, tt):
            return eps

    assert diffusion_loss(Oracle(), z0, ref, torch.zeros(8), s, t, eps).item() == 0.0


def test_loss_toy_two_elements():
    s = make_schedule(2, 0.5, 0.5)

    class Const(torch.nn.Module):
        def forward(self, z_t, z_ref, d_c, t):
            return torch.tensor([0.5, -1.0])

    eps = torch.tensor([1.0, 1.0])
    loss = diffusion_loss(Const(), torch.zeros(2), torch.zeros(2), None, s, 1, eps)
    assert abs(loss.item() - (0.25 + 4.0) / 2) <= 1e-7


def test_loss_gradient_finite_difference():
    torch.manual_seed(3)
    m = Denoiser(latent_channels=2, width=8, n_blocks=1, cond_dim=4, T=10).double()
    with torch.no_grad():
        m.out.weight.normal_(0, 0.5)
    s = make_schedule(10, 1e-3, 0.2)
    z0, ref = _latents(b=1, c=2, n=3, h=2, seed=4, dtype=torch.float64)
    eps = torch.randn(z0.shape, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    d = torch.randn(4, dtype=torch.float64)
    t = torch.tensor([4])
    p = m.blocks[0].spatial.weight
    idx = (1, 2, 0, 1)
    loss = diffusion_loss(m, z0, ref, d, s, t, eps)
    (g,) = torch.autograd.grad(loss, p)
    h = 1e-3
    with torch.no_grad():
        p[idx] += h
        up = diffusion_loss(m, z0, ref, d, s, t, eps).item()
        p[idx] -= 2 * h
        down = diffusion_loss(m, z0, ref, d, s, t, eps).item()
        p[idx] += h
    fd = (up - down) / (2 * h)
    assert abs(fd - g[idx].item()) / max(abs(fd), 1e-12) < 1e-3


# ---- adapters


def test_lora_noop_count_and_merge():
    m = Denoiser(width=16, n_blocks=2, cond_dim=8, T=100)
    with torch.no_grad():
        m.out.weight.normal_()
    z, r = _latents()
    d = torch.randn(8)
    rank = 2
    ad = apply_lora(m, rank)
    assert torch.equal(ad(z, r, d, 9), m(z, r, d, 9))
    expected = 0
    for mod in ad.modules():
        if isinstance(mod, LoRALinear):
            expected += rank * (mod.base.in_features + mod.base.out_features)
        elif isinstance(mod, LoRAConv1x1):
            expected += rank * (mod.base.in_channels + mod.base.out_channels)
    trainable = sum(p.numel() for p in ad.parameters() if p.requires_grad)
    assert trainable == expected == sum(p.numel() for p in adapter_parameters(ad))
    with torch.no_grad():
        for p in adapter_parameters(ad):
            p.normal_(0, 0.1)
    merged = merge_lora(ad)
    assert torch.allclose(merged(z, r, d, 9), ad(z, r, d, 9), atol=1e-5)
    with pytest.raises(InvalidArgument):
        apply_lora(m, 9)
    with pytest.raises(InvalidArgument):
        apply_lora(m, 0)


def test_adapter_training_keeps_base_bit_identical():
    m = Denoiser(width=16, n_blocks=2, cond_dim=8, T=100)
    with torch.no_grad():
        m.out.weight.normal_(0, 0.1)
    ad = apply_lora(m, 4, seed=1)
    before = {k: v.clone() for k, v in base_state(ad).items()}
    s = make_schedule(100, 1e-4, 0.02)
    z0, ref = _latents()
    eps = torch.randn(z0.shape, generator=torch.Generator().manual_seed(2))
    t = torch.tensor([10, 40])
    d = torch.randn(8)
    opt = torch.optim.Adam(adapter_parameters(ad), lr=1e-2)
    first = None
    for _ in range(40):
        loss = diffusion_loss(ad, z0, ref, d, s, t, eps)
        first = first if first is not None else loss.item()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert loss.item() < first
    after = base_state(ad)
    assert set(after) == set(before) == set(dict(m.named_parameters()))
    assert all(torch.equal(before[k], after[k]) for k in before)


# ---- training and sampling


def test_train_diffusion_resume_and_sample(tiny_root, tiny_vae, tiny_pool, tmp_path):
    cfg = tiny_dcfg()
    dirs = [tiny_root / "A", tiny_root / "B"]
    train_diffusion(dirs, tiny_vae, cfg, tmp_path / "full", pool=tiny_pool)
    train_diffusion(dirs, tiny_vae, cfg, tmp_path / "part", max_steps=3, pool=tiny_pool)
    train_diffusion(dirs, tiny_vae, cfg, tmp_path / "part", resume=tmp_path / "part" / "ckpt_step_000003.pt",
                    pool=tiny_pool)
    a = read_log(tmp_path / "full" / "losses.csv")
    b = read_log(tmp_path / "part" / "losses.csv")
    strip = lambda rows: [{k: v for k, v in r.items() if k != "seconds"} for r in rows]  # noqa: E731
    assert len(a) == 6 and strip(a) == strip(b)
    ca = checkpoint.load(tmp_path / "full" / "last.pt")
    cb = checkpoint.load(tmp_path / "part" / "last.pt")
    assert all(torch.equal(ca["ema"][k], cb["ema"][k]) for k in ca["ema"])

    model, sched, ck = load_denoiser(tmp_path / "full" / "last.pt")
    assert ck["vae_state"] == checkpoint.state_hash(tiny_vae)
    z_ref = tiny_pool["zref"][0, 0]
    d_c = model.prompts([tiny_pool["prompts"][0]])[0].detach()
    v1 = sample(model, tiny_vae, z_ref, d_c, sched, seed=5, steps=10)
    v2 = sample(model, tiny_vae, LatentVideo(z_ref), d_c, sched, seed=5, steps=10)
    v3 = sample(model, tiny_vae, z_ref, d_c, sched, seed=6, steps=10)
    assert v1.data.shape == (8, 3, 64, 64)
    assert np.array_equal(v1.data, v2.data) and not np.array_equal(v1.data, v3.data)

    with pytest.raises(InvalidArgument):
        train_diffusion(dirs, tiny_vae, tiny_dcfg(lr=1e-3), tmp_path / "part",
                        resume=tmp_path / "part" / "last.pt", pool=tiny_pool)


def test_finetune_adapters_checkpoint(tiny_root, tiny_vae, tiny_pool, tmp_path):
    dirs = [tiny_root / "A", tiny_root / "B"]
    train_diffusion(dirs, tiny_vae, tiny_dcfg(steps=3), tmp_path / "base", pool=tiny_pool)
    base, _, _ = load_denoiser(tmp_path / "base" / "last.pt")
    finetune_adapters(tmp_path / "base" / "last.pt", dirs, tiny_vae, tiny_dcfg(steps=3), tmp_path / "lora",
                      rank=2, pool=tiny_pool)
    ad, _, ck = load_denoiser(tmp_path / "lora" / "last.pt")
    assert ck["kind"] == "lora" and ad.meta["lora_rank"] == 2
    ref = dict(base.named_parameters())
    assert all(torch.equal(v, ref[k]) for k, v in base_state(ad).items())


def test_pool_shapes(tiny_pool):
    # six clips per domain, then the same twelve over the other domain's plates
    assert tiny_pool["z0"].shape == (24, 16, 8, 8, 8)
    assert tiny_pool["zref"].shape == (24, 1, 16, 8, 8, 8)
    assert len(tiny_pool["prompts"]) == len(tiny_pool["ids"]) == 24


def test_pool_cross_environment_entries(tiny_root, tiny_vae, tiny_pool):
    ids, prompts = tiny_pool["ids"], tiny_pool["prompts"]
    assert ids[:12] == [f"{d}/clip_{i:05d}" for d in "AB" for i in range(6)]
    assert ids[12] == "A/clip_00000+B/clip_00000" and ids[23] == "B/clip_00005+A/clip_00005"
    for k in range(12):
        arm = ids[k][0]
        assert prompts[k][0] == f"arm_{arm}" and prompts[k][2] == f"env_{arm}"
        assert prompts[12 + k][0] == f"arm_{arm}" and prompts[12 + k][2] == f"env_{'B' if arm == 'A' else 'A'}"
    composite = swap_environment(read_clip(tiny_root / "A" / "clip_00002"), read_clip(tiny_root / "B" / "clip_00002"))
    assert torch.equal(tiny_pool["z0"][14], vae_encode(tiny_vae, composite.video).data)
    alone = build_latent_pool([tiny_root / "B"], tiny_vae, tiny_dcfg())
    assert alone["z0"].shape[0] == 6
    off = build_latent_pool([tiny_root / "A", tiny_root / "B"], tiny_vae, tiny_dcfg(cross_env=False))
    assert torch.equal(off["z0"], tiny_pool["z0"][:12]) and torch.equal(off["zref"], tiny_pool["zref"][:12])


def test_collect_frames_cross_environment(tiny_root):
    dirs = [tiny_root / "A", tiny_root / "B"]
    plain = collect_frames(dirs, 10_000, 0)
    mixed = collect_frames(dirs, 10_000, 0, cross_env=True)
    assert plain.shape[0] == 96 and mixed.shape[0] == 192
    assert collect_frames(dirs, 50, 0, cross_env=True).shape[0] == 50
