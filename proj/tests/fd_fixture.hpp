#pragma once

// Shared finite-difference fixture: a 2-layer d_model=16 model checked once
// as plain dense and once as MoE with the routing pinned, so the selection
// stays fixed while parameters are perturbed.

#include <span>
#include <vector>

#include "moelab/fd_check.hpp"
#include "moelab/trainer.hpp"

namespace fdfix {

using namespace moelab;

// At a N(0, 0.02) init the attention is nearly uniform and many gradients sit
// around 1e-7, where central differences at h=1e-5 are pure roundoff noise.
// Scaling the weights (not norms, not the router — near-uniform routing keeps
// every forced expert's gate healthy) moves the whole gradient spectrum clear
// of that floor, so the check measures autodiff, not luck.
inline void condition_for_fd(const Model<double>& m, double factor) {
    for (auto& [name, t] : m.named_params()) {
        if (name.find("norm") != std::string::npos) continue;
        if (name.find("router") != std::string::npos) continue;
        t.values() *= factor;
    }
}

inline ModelConfig fd_config() {
    ModelConfig c;
    c.vocab_size = 13;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = 2;
    c.d_ffn = 20;
    c.max_seq_len = 12;
    c.layer_kind.assign(2, LayerKind::Dense);
    return c;
}

inline const std::vector<int> kIds{3, 7, 1, 12, 5, 9, 2, 10, 6, 11, 0, 8};
inline const std::vector<int> kLangs{0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3};
inline const std::vector<int> kTargets{7, 1, 12, 5, 9, 2, 10, 4, 11, 0, 8, 6};

inline FdReport run_dense(double h = 1e-5) {
    auto m = build_model<double>(fd_config(), 43);
    condition_for_fd(m, 8.0);
    auto loss = [&](Tape<double>& tape) {
        Tensor<double> logits =
            model_forward(tape, m, std::span<const int>(kIds), {});
        return cross_entropy(tape, logits, std::span<const int>(kTargets));
    };
    auto params = m.params();
    return fd_check<double>(loss, params, h);
}

inline FdReport run_moe_pinned(double h = 1e-5) {
    ModelConfig c = fd_config();
    c.layer_kind = {LayerKind::Dense, LayerKind::MoE};
    MoEConfig moe;
    moe.n_experts = 4;
    moe.k = 2;
    moe.strategy = Routing::HybridK;
    c.moe = moe;
    auto m = build_model<double>(c, 2);
    condition_for_fd(m, 8.0);

    SelectionPin pin;
    {
        Tape<double> probe;
        probe.set_recording(false);
        model_forward(probe, m, std::span<const int>(kIds),
                      std::span<const int>(kLangs), nullptr, &pin);
        pin.locked = true;
    }
    auto loss = [&](Tape<double>& tape) {
        Tensor<double> logits =
            model_forward(tape, m, std::span<const int>(kIds),
                          std::span<const int>(kLangs), nullptr, &pin);
        return cross_entropy(tape, logits, std::span<const int>(kTargets));
    };
    auto params = m.params();
    return fd_check<double>(loss, params, h);
}

}  // namespace fdfix
