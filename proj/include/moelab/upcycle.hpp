#pragma once

#include <cstdint>

#include "moelab/transformer.hpp"

namespace moelab {

// Sparse upcycling of one FFN: E deep copies of the dense weights become the
// experts; only the router is fresh.
template <class S>
MoELayer<S> upcycle_layer(const DenseFFN<S>& ffn, int n_experts, Rng& rng) {
    if (n_experts < 1) throw ConfigError("upcycle: n_experts must be >= 1");
    MoELayer<S> layer;
    layer.router = init_router<S>(ffn.w_gate.rows(), n_experts, rng);
    for (int j = 0; j < n_experts; ++j)
        layer.experts.push_back(ffn.clone(true));
    return layer;
}

template <class S>
MoELayer<S> upcycle_layer(const DenseFFN<S>& ffn, int n_experts,
                          std::uint64_t seed) {
    Rng rng(seed);
    return upcycle_layer(ffn, n_experts, rng);
}

// Post-MoE construction: the last n_last layers of a dense model become MoE
// (upcycled from their own FFNs), the rest stay dense. n_last = 0 returns an
// unchanged copy. Attention, norms, and embeddings carry over verbatim.
template <class S>
Model<S> build_post_moe(const Model<S>& dense, int n_last, MoEConfig moe_cfg,
                        std::uint64_t seed) {
    const int l = dense.cfg.n_layers;
    if (n_last < 0 || n_last > l)
        throw ConfigError("post-moe: need 0 <= N <= " + std::to_string(l) +
                          ", got " + std::to_string(n_last));
    for (const Block<S>& b : dense.blocks)
        if (b.kind != LayerKind::Dense)
            throw ConfigError("post-moe: source model must be fully dense");
    if (n_last > 0) moe_cfg.validate();

    Model<S> out = dense.clone(true);
    if (n_last == 0) return out;

    out.cfg.moe = moe_cfg;
    Rng rng(seed);
    for (int i = l - n_last; i < l; ++i) {
        out.cfg.layer_kind[i] = LayerKind::MoE;
        out.blocks[i].kind = LayerKind::MoE;
        out.blocks[i].moe =
            upcycle_layer(out.blocks[i].ffn, moe_cfg.n_experts, rng);
        out.blocks[i].ffn = DenseFFN<S>{};
    }
    out.cfg.validate();
    return out;
}

struct ParamCount {
    std::int64_t total = 0;
    std::int64_t active = 0;
};

// Active parameters: everything outside MoE layers counts once; each MoE
// layer contributes its router plus the experts a token actually runs
// (k for TopK/HybridK, 2 for LangSpec, all E for DenseFull).
template <class S>
ParamCount param_count(const Model<S>& m) {
    ParamCount pc;
    pc.total = m.param_total();
    pc.active = pc.total;
    for (const Block<S>& b : m.blocks) {
        if (b.kind != LayerKind::MoE) continue;
        const MoEConfig& cfg = *m.cfg.moe;
        int active_experts = cfg.k;
        if (cfg.strategy == Routing::LangSpec) active_experts = 2;
        if (cfg.strategy == Routing::DenseFull) active_experts = cfg.n_experts;
        const std::int64_t per_expert = b.moe.experts[0].w_gate.size() +
                                        b.moe.experts[0].w_up.size() +
                                        b.moe.experts[0].w_down.size();
        pc.active -= (cfg.n_experts - active_experts) * per_expert;
    }
    return pc;
}

}  // namespace moelab
