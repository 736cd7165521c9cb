#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moelab/moe.hpp"
#include "moelab/ops.hpp"
#include "moelab/rng.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

enum class LayerKind { Dense, MoE };

inline constexpr double kNormEps = 1e-5;
inline constexpr double kInitStd = 0.02;

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 0;
    int n_heads = 0;
    int n_layers = 0;
    int d_ffn = 0;
    int max_seq_len = 0;
    std::vector<LayerKind> layer_kind;  // one per layer
    std::optional<MoEConfig> moe;

    int n_moe_layers() const {
        int n = 0;
        for (LayerKind k : layer_kind) n += k == LayerKind::MoE ? 1 : 0;
        return n;
    }

    void validate() const {
        if (vocab_size < 1 || d_model < 1 || n_heads < 1 || n_layers < 1 ||
            d_ffn < 1 || max_seq_len < 1)
            throw ConfigError("model: all dimensions must be positive");
        if (d_model % n_heads != 0)
            throw ConfigError("model: d_model " + std::to_string(d_model) +
                              " not divisible by n_heads " + std::to_string(n_heads));
        if (static_cast<int>(layer_kind.size()) != n_layers)
            throw ConfigError("model: layer_kind has " +
                              std::to_string(layer_kind.size()) + " entries for " +
                              std::to_string(n_layers) + " layers");
        if (n_moe_layers() > 0) {
            if (!moe) throw ConfigError("model: MoE layers present but no moe config");
            moe->validate();
        }
    }

    static ModelConfig desk() {
        ModelConfig c;
        c.vocab_size = 512;
        c.d_model = 64;
        c.n_heads = 4;
        c.n_layers = 8;
        c.d_ffn = 256;
        c.max_seq_len = 128;
        c.layer_kind.assign(8, LayerKind::Dense);
        return c;
    }
};

template <class S>
struct Block {
    LayerKind kind = LayerKind::Dense;
    Tensor<S> attn_norm;  // [d]
    Tensor<S> wq, wk, wv, wo;  // [d x d]
    Tensor<S> ffn_norm;  // [d]
    DenseFFN<S> ffn;     // when kind == Dense
    MoELayer<S> moe;     // when kind == MoE
};

template <class S>
struct Model {
    ModelConfig cfg;
    Tensor<S> tok_emb;     // [vocab x d]
    Tensor<S> pos_emb;     // [max_seq x d]
    std::vector<Block<S>> blocks;
    Tensor<S> final_norm;  // [d]
    Tensor<S> head;        // [d x vocab], untied

    // Stable enumeration; checkpoint layout and optimizer state follow it.
    std::vector<std::pair<std::string, Tensor<S>>> named_params() const {
        std::vector<std::pair<std::string, Tensor<S>>> out;
        out.emplace_back("tok_emb", tok_emb);
        out.emplace_back("pos_emb", pos_emb);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "layer" + std::to_string(i) + ".";
            const Block<S>& b = blocks[i];
            out.emplace_back(p + "attn_norm", b.attn_norm);
            out.emplace_back(p + "wq", b.wq);
            out.emplace_back(p + "wk", b.wk);
            out.emplace_back(p + "wv", b.wv);
            out.emplace_back(p + "wo", b.wo);
            out.emplace_back(p + "ffn_norm", b.ffn_norm);
            if (b.kind == LayerKind::Dense) {
                out.emplace_back(p + "ffn.gate", b.ffn.w_gate);
                out.emplace_back(p + "ffn.up", b.ffn.w_up);
                out.emplace_back(p + "ffn.down", b.ffn.w_down);
            } else {
                out.emplace_back(p + "router", b.moe.router);
                for (std::size_t j = 0; j < b.moe.experts.size(); ++j) {
                    const std::string e =
                        p + "expert" + std::to_string(j) + ".";
                    out.emplace_back(e + "gate", b.moe.experts[j].w_gate);
                    out.emplace_back(e + "up", b.moe.experts[j].w_up);
                    out.emplace_back(e + "down", b.moe.experts[j].w_down);
                }
            }
        }
        out.emplace_back("final_norm", final_norm);
        out.emplace_back("head", head);
        return out;
    }

    std::vector<Tensor<S>> params() const {
        std::vector<Tensor<S>> out;
        for (auto& [name, t] : named_params()) out.push_back(t);
        return out;
    }

    std::int64_t param_total() const {
        std::int64_t n = 0;
        for (auto& [name, t] : named_params()) n += t.size();
        return n;
    }

    void set_requires_grad(bool b) const {
        for (auto& [name, t] : named_params()) t.set_requires_grad(b);
    }

    void zero_grad() const {
        for (auto& [name, t] : named_params()) t.zero_grad();
    }

    Model clone(bool requires_grad = true) const {
        Model out;
        out.cfg = cfg;
        out.tok_emb = tok_emb.clone(requires_grad);
        out.pos_emb = pos_emb.clone(requires_grad);
        for (const Block<S>& b : blocks) {
            Block<S> nb;
            nb.kind = b.kind;
            nb.attn_norm = b.attn_norm.clone(requires_grad);
            nb.wq = b.wq.clone(requires_grad);
            nb.wk = b.wk.clone(requires_grad);
            nb.wv = b.wv.clone(requires_grad);
            nb.wo = b.wo.clone(requires_grad);
            nb.ffn_norm = b.ffn_norm.clone(requires_grad);
            if (b.kind == LayerKind::Dense) {
                nb.ffn = b.ffn.clone(requires_grad);
            } else {
                nb.moe.router = b.moe.router.clone(requires_grad);
                for (const DenseFFN<S>& e : b.moe.experts)
                    nb.moe.experts.push_back(e.clone(requires_grad));
            }
            out.blocks.push_back(std::move(nb));
        }
        out.final_norm = final_norm.clone(requires_grad);
        out.head = head.clone(requires_grad);
        return out;
    }
};

template <class S>
Model<S> build_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    auto draw = [&](Shape shape) {
        Tensor<S> t = Tensor<S>::zeros(std::move(shape), true);
        for (std::int64_t i = 0; i < t.size(); ++i)
            t.values()[i] = static_cast<S>(rng.next_normal(0.0, kInitStd));
        return t;
    };
    const int d = cfg.d_model;
    Model<S> m;
    m.cfg = cfg;
    m.tok_emb = draw({cfg.vocab_size, d});
    m.pos_emb = draw({cfg.max_seq_len, d});
    for (int i = 0; i < cfg.n_layers; ++i) {
        Block<S> b;
        b.kind = cfg.layer_kind[i];
        b.attn_norm = Tensor<S>::full({d}, S(1), true);
        b.wq = draw({d, d});
        b.wk = draw({d, d});
        b.wv = draw({d, d});
        b.wo = draw({d, d});
        b.ffn_norm = Tensor<S>::full({d}, S(1), true);
        if (b.kind == LayerKind::Dense) {
            b.ffn = init_ffn<S>(d, cfg.d_ffn, rng, static_cast<S>(kInitStd));
        } else {
            b.moe.router = init_router<S>(d, cfg.moe->n_experts, rng);
            for (int j = 0; j < cfg.moe->n_experts; ++j)
                b.moe.experts.push_back(
                    init_ffn<S>(d, cfg.d_ffn, rng, static_cast<S>(kInitStd)));
        }
        m.blocks.push_back(std::move(b));
    }
    m.final_norm = Tensor<S>::full({d}, S(1), true);
    m.head = draw({d, cfg.vocab_size});
    return m;
}

// Per-MoE-layer routing decisions frozen across forward passes (keyed by
// block index). Fill on the first pass, set locked, and later passes reuse
// the stored ids — finite differences then see a fixed selection.
struct SelectionPin {
    bool locked = false;
    std::map<int, std::vector<std::vector<int>>> by_layer;
};

// Observer for MoE routing: called once per MoE layer per forward with the
// block index and per-token selections. Must not mutate anything.
using MoEHook =
    std::function<void(int layer, const std::vector<ExpertSelection>&)>;

template <class S>
Tensor<S> attention(Tape<S>& tape, const Block<S>& b, const Tensor<S>& x,
                    int n_heads) {
    const int n = x.rows(), d = x.cols();
    const int hd = d / n_heads;
    Tensor<S> h = rmsnorm(tape, x, b.attn_norm, static_cast<S>(kNormEps));
    Tensor<S> q = matmul(tape, h, b.wq);
    Tensor<S> k = matmul(tape, h, b.wk);
    Tensor<S> v = matmul(tape, h, b.wv);
    const S scl = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
    std::vector<Tensor<S>> heads;
    std::vector<BlockCoord> at;
    for (int hh = 0; hh < n_heads; ++hh) {
        Tensor<S> qh = slice_block(tape, q, 0, n, hh * hd, hd);
        Tensor<S> kh = slice_block(tape, k, 0, n, hh * hd, hd);
        Tensor<S> vh = slice_block(tape, v, 0, n, hh * hd, hd);
        Tensor<S> scores = matmul_nt(tape, qh, kh, scl);
        Tensor<S> att = causal_masked_softmax(tape, scores);
        heads.push_back(matmul(tape, att, vh));
        at.push_back({0, hh * hd});
    }
    Tensor<S> merged = assemble_blocks(tape, {n, d}, heads, at);
    return matmul(tape, merged, b.wo);
}

// Causal forward over one token window. lang_experts[i] is token i's
// language-expert id under the active scheme (-1 when uncovered); it is only
// consulted by strategies that need it. Positions are absolute within the
// window.
template <class S>
Tensor<S> model_forward(Tape<S>& tape, const Model<S>& m,
                        std::span<const int> token_ids,
                        std::span<const int> lang_experts,
                        const MoEHook* hook = nullptr,
                        SelectionPin* pin = nullptr) {
    const int n = static_cast<int>(token_ids.size());
    if (n < 1) throw ShapeError("forward: empty token window");
    if (n > m.cfg.max_seq_len)
        throw ConfigError("forward: window length " + std::to_string(n) +
                          " exceeds max_seq_len " +
                          std::to_string(m.cfg.max_seq_len));
    const bool needs_lang =
        m.cfg.moe && (m.cfg.moe->strategy == Routing::HybridK ||
                      m.cfg.moe->strategy == Routing::LangSpec);
    if (needs_lang && m.cfg.n_moe_layers() > 0 &&
        static_cast<int>(lang_experts.size()) != n && !(pin && pin->locked))
        throw ConfigError("forward: lang tags required for this routing strategy");

    std::vector<int> positions(n);
    for (int i = 0; i < n; ++i) positions[i] = i;

    tape.set_scope("embed");
    Tensor<S> x = add(tape, embed_rows(tape, m.tok_emb, token_ids),
                      embed_rows(tape, m.pos_emb, positions));

    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
        const Block<S>& b = m.blocks[i];
        tape.set_scope("layer" + std::to_string(i) + ".attn");
        x = add(tape, x, attention(tape, b, x, m.cfg.n_heads));
        tape.set_scope("layer" + std::to_string(i) + ".ffn");
        Tensor<S> h = rmsnorm(tape, x, b.ffn_norm, static_cast<S>(kNormEps));
        Tensor<S> y;
        if (b.kind == LayerKind::Dense) {
            y = ffn_forward(tape, b.ffn, h);
        } else {
            std::vector<std::vector<int>>* pinned = nullptr;
            if (pin && pin->locked) {
                auto it = pin->by_layer.find(static_cast<int>(i));
                if (it == pin->by_layer.end())
                    throw ConfigError("forward: pin has no entry for layer " +
                                      std::to_string(i));
                pinned = &it->second;
            }
            std::vector<ExpertSelection> sels;
            std::vector<ExpertSelection>* sel_out =
                (hook || (pin && !pin->locked)) ? &sels : nullptr;
            y = moe_layer_forward(tape, b.moe, *m.cfg.moe, h, lang_experts,
                                  pinned, sel_out);
            if (pin && !pin->locked) {
                auto& slot = pin->by_layer[static_cast<int>(i)];
                slot.clear();
                for (auto& s : sels) slot.push_back(s.expert_ids);
            }
            if (hook) (*hook)(static_cast<int>(i), sels);
        }
        x = add(tape, x, y);
    }

    tape.set_scope("head");
    Tensor<S> out = rmsnorm(tape, x, m.final_norm, static_cast<S>(kNormEps));
    out = matmul(tape, out, m.head);
    tape.set_scope("");
    return out;
}

}  // namespace moelab
