#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moelab/ops.hpp"
#include "moelab/rng.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

enum class Routing { TopK, HybridK, LangSpec, DenseFull };
enum class ExpertScheme { PerLanguage, PerFamily };

inline std::string to_string(Routing r) {
    switch (r) {
        case Routing::TopK: return "topk";
        case Routing::HybridK: return "hybridk";
        case Routing::LangSpec: return "langspec";
        case Routing::DenseFull: return "densefull";
    }
    return "?";
}

inline Routing routing_from_string(const std::string& s) {
    if (s == "topk") return Routing::TopK;
    if (s == "hybridk") return Routing::HybridK;
    if (s == "langspec") return Routing::LangSpec;
    if (s == "densefull") return Routing::DenseFull;
    throw ConfigError("unknown routing strategy '" + s + "'");
}

inline std::string to_string(ExpertScheme s) {
    return s == ExpertScheme::PerLanguage ? "per_language" : "per_family";
}

inline ExpertScheme scheme_from_string(const std::string& s) {
    if (s == "per_language") return ExpertScheme::PerLanguage;
    if (s == "per_family") return ExpertScheme::PerFamily;
    throw ConfigError("unknown expert scheme '" + s + "'");
}

// Router weights are drawn from N(0, 0.02^2).
inline constexpr double kRouterInitStd = 0.02;

struct MoEConfig {
    int n_experts = 0;
    int k = 0;
    Routing strategy = Routing::TopK;
    std::optional<int> shared_expert;  // required for LangSpec
    ExpertScheme expert_scheme = ExpertScheme::PerLanguage;

    void validate() const {
        if (n_experts < 1) throw ConfigError("moe: n_experts must be >= 1");
        if (k < 1 || k > n_experts)
            throw ConfigError("moe: need 1 <= k <= n_experts, got k=" +
                              std::to_string(k) + ", E=" + std::to_string(n_experts));
        if (strategy == Routing::LangSpec) {
            if (!shared_expert)
                throw ConfigError("moe: langspec routing requires a shared expert");
            if (*shared_expert < 0 || *shared_expert >= n_experts)
                throw ConfigError("moe: shared expert index out of range");
        }
    }
};

// One token's routing decision at one layer: which experts fire and with
// what mixing weights. Ids are sorted ascending; gates align with ids.
struct ExpertSelection {
    std::vector<int> expert_ids;
    std::vector<double> gates;
};

namespace detail {

inline ExpertSelection finalize_selection(std::vector<int> ids,
                                          std::span<const double> probs) {
    std::sort(ids.begin(), ids.end());
    double denom = 0.0;
    for (int id : ids) denom += probs[id];
    ExpertSelection sel;
    sel.expert_ids = std::move(ids);
    sel.gates.reserve(sel.expert_ids.size());
    for (int id : sel.expert_ids)
        sel.gates.push_back(denom > 0.0 ? probs[id] / denom
                                        : 1.0 / double(sel.expert_ids.size()));
    return sel;
}

// k largest probabilities; ties keep the lower index.
inline std::vector<int> topk_ids(std::span<const double> probs, int k) {
    std::vector<int> order(probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return probs[a] > probs[b]; });
    return {order.begin(), order.begin() + k};
}

}  // namespace detail

inline ExpertSelection select_topk(std::span<const double> probs, int k) {
    if (k < 1 || k > static_cast<int>(probs.size()))
        throw ConfigError("select_topk: need 1 <= k <= E");
    return detail::finalize_selection(detail::topk_ids(probs, k), probs);
}

// Top-k with the token's language expert forced in: if it is absent from the
// top-k set, the member with the smallest probability is evicted (ties evict
// the largest index among the minima) and the language expert takes its
// place. Gates are the surviving probabilities renormalized.
inline ExpertSelection select_hybrid(std::span<const double> probs, int k,
                                     int lang_expert) {
    if (k < 1 || k > static_cast<int>(probs.size()))
        throw ConfigError("select_hybrid: need 1 <= k <= E");
    if (lang_expert < 0 || lang_expert >= static_cast<int>(probs.size()))
        throw ConfigError("select_hybrid: language expert index out of range");
    std::vector<int> ids = detail::topk_ids(probs, k);
    if (std::find(ids.begin(), ids.end(), lang_expert) == ids.end()) {
        std::size_t evict = 0;
        for (std::size_t i = 1; i < ids.size(); ++i) {
            const bool smaller = probs[ids[i]] < probs[ids[evict]];
            const bool tie_higher_index =
                probs[ids[i]] == probs[ids[evict]] && ids[i] > ids[evict];
            if (smaller || tie_higher_index) evict = i;
        }
        ids[evict] = lang_expert;
    }
    return detail::finalize_selection(std::move(ids), probs);
}

// Always the language expert plus the shared expert; router probabilities of
// the pair, renormalized, weight the mix.
inline ExpertSelection select_langspec(int lang_expert, int shared_expert,
                                       std::span<const double> probs) {
    const int e = static_cast<int>(probs.size());
    if (lang_expert < 0 || lang_expert >= e || shared_expert < 0 || shared_expert >= e)
        throw ConfigError("select_langspec: expert index out of range");
    if (lang_expert == shared_expert)
        throw ConfigError("select_langspec: language and shared expert coincide");
    return detail::finalize_selection({lang_expert, shared_expert}, probs);
}

// Full activation: every expert fires, weighted by the raw router
// distribution (already normalized).
inline ExpertSelection select_dense_full(std::span<const double> probs) {
    ExpertSelection sel;
    sel.expert_ids.resize(probs.size());
    std::iota(sel.expert_ids.begin(), sel.expert_ids.end(), 0);
    sel.gates.assign(probs.begin(), probs.end());
    return sel;
}

// SwiGLU feed-forward block: down(silu(x Wg) * (x Wu)).
template <class S>
struct DenseFFN {
    Tensor<S> w_gate;  // [d x f]
    Tensor<S> w_up;    // [d x f]
    Tensor<S> w_down;  // [f x d]

    DenseFFN clone(bool requires_grad) const {
        return DenseFFN{w_gate.clone(requires_grad), w_up.clone(requires_grad),
                        w_down.clone(requires_grad)};
    }
};

template <class S>
Tensor<S> ffn_forward(Tape<S>& tape, const DenseFFN<S>& f, const Tensor<S>& x) {
    Tensor<S> a = silu(tape, matmul(tape, x, f.w_gate));
    Tensor<S> b = matmul(tape, x, f.w_up);
    return matmul(tape, mul(tape, a, b), f.w_down);
}

template <class S>
DenseFFN<S> init_ffn(int d_model, int d_ffn, Rng& rng, S std_dev) {
    auto draw = [&](Shape shape) {
        Tensor<S> t = Tensor<S>::zeros(shape, true);
        for (std::int64_t i = 0; i < t.size(); ++i)
            t.values()[i] = static_cast<S>(rng.next_normal(0.0, std_dev));
        return t;
    };
    return DenseFFN<S>{draw({d_model, d_ffn}), draw({d_model, d_ffn}),
                       draw({d_ffn, d_model})};
}

template <class S>
Tensor<S> init_router(int d_model, int n_experts, Rng& rng) {
    Tensor<S> w = Tensor<S>::zeros({d_model, n_experts}, true);
    for (std::int64_t i = 0; i < w.size(); ++i)
        w.values()[i] = static_cast<S>(rng.next_normal(0.0, kRouterInitStd));
    return w;
}

// View a hidden vector as a single-row matrix (shares storage).
template <class S>
Tensor<S> reshape_row(const Tensor<S>& h) {
    if (h.rank() == 2) return h;
    if (h.rank() != 1) throw ShapeError("reshape_row: rank-1 or rank-2 tensor required");
    return h.reshaped({1, static_cast<int>(h.size())});
}

// softmax(h . W) over experts.
template <class S>
Tensor<S> router_probs(Tape<S>& tape, const Tensor<S>& h, const Tensor<S>& router) {
    return softmax(tape, matmul(tape, reshape_row(h), router));
}

template <class S>
struct MoELayer {
    Tensor<S> router;                  // [d x E]
    std::vector<DenseFFN<S>> experts;  // E entries
};

// Spec-level combination: sum of gate-weighted expert outputs for one hidden
// row. Gates are fixed weights here; the trainable-gate path lives in
// moe_layer_forward.
template <class S>
Tensor<S> moe_forward(Tape<S>& tape, const Tensor<S>& h,
                      const ExpertSelection& sel,
                      const std::vector<DenseFFN<S>>& experts) {
    if (sel.expert_ids.size() != sel.gates.size())
        throw ConfigError("moe_forward: ids/gates length mismatch");
    for (int id : sel.expert_ids)
        if (id < 0 || id >= static_cast<int>(experts.size()))
            throw ConfigError("moe_forward: expert index " + std::to_string(id) +
                              " out of range for E=" + std::to_string(experts.size()));
    Tensor<S> x = reshape_row(h);
    Tensor<S> out;
    for (std::size_t i = 0; i < sel.expert_ids.size(); ++i) {
        Tensor<S> y = scale(tape, ffn_forward(tape, experts[sel.expert_ids[i]], x),
                            static_cast<S>(sel.gates[i]));
        out = out.defined() ? add(tape, out, y) : y;
    }
    return out;
}

// gates[i][s] = probs(i, ids[i][s]) / sum_s' probs(i, ids[i][s']); the
// gradient reaches only the selected probability entries.
template <class S>
Tensor<S> renorm_gather(Tape<S>& tape, const Tensor<S>& probs,
                        const std::vector<std::vector<int>>& ids) {
    const int n = probs.rows();
    if (static_cast<int>(ids.size()) != n)
        throw ShapeError("renorm_gather: one id list per row required");
    const int kk = n > 0 ? static_cast<int>(ids[0].size()) : 0;
    Tensor<S> out = Tensor<S>::zeros({n, kk});
    auto pm = probs.mat();
    auto om = out.mat();
    for (int i = 0; i < n; ++i) {
        if (static_cast<int>(ids[i].size()) != kk)
            throw ShapeError("renorm_gather: ragged id lists");
        S denom = S(0);
        for (int s = 0; s < kk; ++s) denom += pm(i, ids[i][s]);
        for (int s = 0; s < kk; ++s)
            om(i, s) = denom > S(0) ? pm(i, ids[i][s]) / denom : S(1) / S(kk);
    }
    detail::check_output_finite(tape, out, "renorm_gather");
    if (tape.recording() && probs.requires_grad()) {
        out.set_requires_grad(true);
        tape.record("renorm_gather", [probs, out, ids, n, kk]() mutable {
            auto pm2 = probs.mat();
            auto gp = probs.grad_mat();
            auto om2 = out.mat();
            auto go = out.grad_mat();
            for (int i = 0; i < n; ++i) {
                S denom = S(0);
                for (int s = 0; s < kk; ++s) denom += pm2(i, ids[i][s]);
                if (denom <= S(0)) continue;
                S dot = S(0);
                for (int s = 0; s < kk; ++s) dot += go(i, s) * om2(i, s);
                for (int s = 0; s < kk; ++s)
                    gp(i, ids[i][s]) += (go(i, s) - dot) / denom;
            }
        });
    }
    return out;
}

// Scatter gate-weighted expert outputs back into token order.
// expert_rows[e][j] is the destination row of expert_out[e] row j;
// expert_slot[e][j] is that token's gate column.
template <class S>
Tensor<S> moe_combine(Tape<S>& tape, int n_rows, int d,
                      const std::vector<Tensor<S>>& expert_out,
                      const std::vector<std::vector<int>>& expert_rows,
                      const std::vector<std::vector<int>>& expert_slot,
                      const Tensor<S>& gates) {
    Tensor<S> out = Tensor<S>::zeros({n_rows, d});
    auto om = out.mat();
    auto gm = gates.mat();
    bool rg = gates.requires_grad();
    for (std::size_t e = 0; e < expert_out.size(); ++e) {
        if (!expert_out[e].defined()) continue;
        auto ym = expert_out[e].mat();
        rg = rg || expert_out[e].requires_grad();
        for (std::size_t j = 0; j < expert_rows[e].size(); ++j)
            om.row(expert_rows[e][j]) +=
                ym.row(static_cast<int>(j)) * gm(expert_rows[e][j], expert_slot[e][j]);
    }
    detail::check_output_finite(tape, out, "moe_combine");
    if (tape.recording() && rg) {
        out.set_requires_grad(true);
        std::vector<Tensor<S>> eo = expert_out;
        tape.record("moe_combine",
                    [eo, expert_rows, expert_slot, gates, out]() mutable {
            auto go = out.grad_mat();
            auto gm2 = gates.mat();
            for (std::size_t e = 0; e < eo.size(); ++e) {
                if (!eo[e].defined()) continue;
                auto ym = eo[e].mat();
                for (std::size_t j = 0; j < expert_rows[e].size(); ++j) {
                    const int r = expert_rows[e][j];
                    const int s = expert_slot[e][j];
                    if (eo[e].requires_grad())
                        eo[e].grad_mat().row(static_cast<int>(j)) +=
                            go.row(r) * gm2(r, s);
                    if (gates.requires_grad())
                        gates.grad_mat()(r, s) +=
                            go.row(r).dot(ym.row(static_cast<int>(j)));
                }
            }
        });
    }
    return out;
}

// Full MoE layer pass over packed hidden rows. lang_experts[i] is token i's
// language expert id (or -1 when the scheme does not cover its language).
// Returns the layer output and reports per-token selections through `selected`
// when non-null.
template <class S>
Tensor<S> moe_layer_forward(Tape<S>& tape, const MoELayer<S>& layer,
                            const MoEConfig& cfg, const Tensor<S>& x,
                            std::span<const int> lang_experts,
                            std::vector<std::vector<int>>* pinned_ids,
                            std::vector<ExpertSelection>* selected) {
    const int n = x.rows();
    const int e = cfg.n_experts;
    if (static_cast<int>(layer.experts.size()) != e)
        throw ConfigError("moe layer holds " + std::to_string(layer.experts.size()) +
                          " experts, config says " + std::to_string(e));
    Tensor<S> probs = softmax(tape, matmul(tape, x, layer.router));
    auto pm = probs.mat();

    std::vector<std::vector<int>> ids(n);
    std::vector<double> row(e);
    for (int i = 0; i < n; ++i) {
        if (pinned_ids) {
            ids[i] = (*pinned_ids)[i];
            continue;
        }
        for (int j = 0; j < e; ++j) row[j] = static_cast<double>(pm(i, j));
        switch (cfg.strategy) {
            case Routing::TopK:
                ids[i] = detail::topk_ids(row, cfg.k);
                std::sort(ids[i].begin(), ids[i].end());
                break;
            case Routing::HybridK: {
                if (lang_experts[i] < 0)
                    throw SchemeError("hybridk: token language has no expert under "
                                      "the active scheme");
                ExpertSelection s = select_hybrid(row, cfg.k, lang_experts[i]);
                ids[i] = std::move(s.expert_ids);
                break;
            }
            case Routing::LangSpec: {
                if (lang_experts[i] < 0)
                    throw SchemeError("langspec: token language has no expert under "
                                      "the active scheme");
                ExpertSelection s =
                    select_langspec(lang_experts[i], *cfg.shared_expert, row);
                ids[i] = std::move(s.expert_ids);
                break;
            }
            case Routing::DenseFull: {
                ids[i].resize(e);
                std::iota(ids[i].begin(), ids[i].end(), 0);
                break;
            }
        }
    }

    Tensor<S> gates = cfg.strategy == Routing::DenseFull
                          ? probs
                          : renorm_gather(tape, probs, ids);

    // Group tokens per expert so each expert runs one batched FFN.
    std::vector<std::vector<int>> expert_rows(e), expert_slot(e);
    for (int i = 0; i < n; ++i)
        for (std::size_t s = 0; s < ids[i].size(); ++s) {
            expert_rows[ids[i][s]].push_back(i);
            expert_slot[ids[i][s]].push_back(static_cast<int>(s));
        }

    std::vector<Tensor<S>> expert_out(e);
    for (int j = 0; j < e; ++j) {
        if (expert_rows[j].empty()) continue;
        Tensor<S> xin = gather_rows(tape, x, expert_rows[j]);
        expert_out[j] = ffn_forward(tape, layer.experts[j], xin);
    }
    Tensor<S> out = moe_combine(tape, n, x.cols(), expert_out, expert_rows,
                                expert_slot, gates);

    if (selected) {
        selected->clear();
        selected->reserve(n);
        auto gm = gates.mat();
        for (int i = 0; i < n; ++i) {
            ExpertSelection s;
            s.expert_ids = ids[i];
            s.gates.reserve(ids[i].size());
            for (std::size_t c = 0; c < ids[i].size(); ++c)
                s.gates.push_back(static_cast<double>(gm(i, static_cast<int>(c))));
            selected->push_back(std::move(s));
        }
    }
    return out;
}

}  // namespace moelab
