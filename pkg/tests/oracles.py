"""Closed-form oracles shared by the test modules."""


HIDDEN = 32


def attn_block_params(d, heads, hidden=HIDDEN):
    norms = 4 * d
    mhsa = 4 * d * d + 3 * d            # no key bias
    mlp = 8 * d * d + 5 * d
    layerscale = 2 * d
    relbias = 3 * hidden + hidden * heads  # 2->hidden (+bias) -> heads, no output bias
    return norms + mhsa + mlp + layerscale + relbias


def abs_bias_params(d, hidden=HIDDEN):
    return 3 * hidden + hidden * d + d


def oracle(spec):
    """Closed-form trainable-parameter count, written without the builder."""
    c1, c2 = spec.stem_dims
    parts = {"stem": 27 * c1 + 2 * c1 + 9 * c1 * c2 + 2 * c2}
    c_in = c2
    for i, st in enumerate(spec.stages):
        n = 2 * c_in + 9 * c_in * st.dim
        d = st.dim
        if st.kind == "res":
            n += st.depth * 2 * (9 * d * d + 2 * d)
        else:
            H = spec.stage_resolution(i)
            k = min(st.window, H)
            has_ct = (H // k) ** 2 > 1 and st.L > 0
            per_block = attn_block_params(d, st.heads) * (2 if has_ct else 1)
            n += st.depth * per_block + abs_bias_params(d)
            if has_ct:
                n += 9 * d * d + d + abs_bias_params(d)
        parts[f"stage{i + 1}"] = n
        c_in = st.dim
    parts["head"] = 2 * c_in + c_in * spec.num_classes + spec.num_classes
    return sum(parts.values()), parts
