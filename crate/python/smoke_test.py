"""Smoke test for the emvq Python bindings.

Build and install first:
    pip install maturin
    maturin develop --release -m crates/python/Cargo.toml
"""

import emvq_py as emvq


def main() -> None:
    frame = emvq.synth_frame(64, 96, seed=3)
    assert (frame.height, frame.width) == (64, 96)

    # The block-mean codec needs no training and reconstructs a blocky frame exactly.
    blocky = bytes(((r // 4) * 7 + (c // 4) * 13) % 256 for r in range(64) for c in range(96))
    stub_frame = emvq.Frame.from_gray8(64, 96, blocky)
    stub, losses = emvq.train(emvq.Config(model_kind="block_mean", tile_size=32), [stub_frame])
    assert stub.kind == "block_mean" and losses == []
    data = stub.encode(stub_frame, 2)
    info = emvq.container_info(data)
    assert info["nominal_ratio"] == 16, info
    out = stub.decode(data)
    diff = max(abs(a - b) for a, b in zip(out.to_gray8(), blocky))
    assert diff <= 1, diff

    cfg = emvq.Config(
        hidden_width=8, embed_dim=8, codebook_size=16, residual_blocks=1,
        tile_size=32, max_steps=3, holdout_fraction=0, seed=1,
    )
    ckpt, losses = emvq.train(cfg, [frame])
    assert len(losses) == 3 and all(l == l for l in losses)
    data = ckpt.encode(frame, 2)
    recon = ckpt.decode(data, mode="top-only")
    assert (recon.height, recon.width) == (64, 96)
    print("psnr", round(emvq.psnr(frame, recon), 2), "ssim", round(emvq.ssim(frame, recon), 3))

    try:
        stub.decode(data)
    except emvq.DigestMismatchError:
        pass
    else:
        raise AssertionError("digest mismatch not raised")

    try:
        emvq.container_info(b"EMVQ" + bytes(10))
    except emvq.EmvqError:
        pass
    else:
        raise AssertionError("truncated container accepted")

    print("smoke test ok")


if __name__ == "__main__":
    main()
