#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "moelab/transformer.hpp"

namespace moelab {

struct TrainConfig {
    int total_steps = 1000;
    int windows_per_step = 8;
    int seq_len = 128;
    double lr_peak = 1e-3;
    double warmup_prop = 0.3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    std::uint64_t seed = 42;

    void validate() const {
        if (total_steps < 1) throw ConfigError("train: total_steps must be >= 1");
        if (windows_per_step < 1)
            throw ConfigError("train: windows_per_step must be >= 1");
        if (seq_len < 2) throw ConfigError("train: seq_len must be >= 2");
        if (lr_peak <= 0) throw ConfigError("train: lr_peak must be positive");
        if (warmup_prop < 0 || warmup_prop >= 1)
            throw ConfigError("train: warmup_prop must be in [0, 1)");
    }
};

// Linear warmup to the peak over warmup_prop of the run, then cosine decay
// to zero at the final step.
inline double lr_at(int step, int total_steps, double peak, double warmup_prop) {
    const double w = warmup_prop * total_steps;
    const double s = static_cast<double>(step);
    if (s < w) return peak * s / w;
    if (total_steps <= w) return peak;
    const double frac = (s - w) / (static_cast<double>(total_steps) - w);
    return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

template <class S>
class AdamW {
public:
    AdamW(std::vector<Tensor<S>> params, const TrainConfig& cfg)
        : params_(std::move(params)),
          beta1_(cfg.beta1),
          beta2_(cfg.beta2),
          eps_(cfg.adam_eps),
          wd_(cfg.weight_decay) {
        for (auto& p : params_) {
            m_.emplace_back(Eigen::Matrix<S, Eigen::Dynamic, 1>::Zero(p.size()));
            v_.emplace_back(Eigen::Matrix<S, Eigen::Dynamic, 1>::Zero(p.size()));
        }
    }

    int steps_taken() const { return t_; }

    void step(double lr) {
        ++t_;
        const S b1 = static_cast<S>(beta1_), b2 = static_cast<S>(beta2_);
        const S bc1 = static_cast<S>(1.0 - std::pow(beta1_, t_));
        const S bc2 = static_cast<S>(1.0 - std::pow(beta2_, t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].values();
            const auto& g = params_[i].grad();
            m_[i] = b1 * m_[i] + (S(1) - b1) * g;
            v_[i] = b2 * v_[i] + (S(1) - b2) * g.cwiseProduct(g);
            p.array() -= static_cast<S>(lr) *
                         ((m_[i].array() / bc1) /
                              ((v_[i].array() / bc2).sqrt() + static_cast<S>(eps_)) +
                          static_cast<S>(wd_) * p.array());
        }
    }

private:
    std::vector<Tensor<S>> params_;
    std::vector<Eigen::Matrix<S, Eigen::Dynamic, 1>> m_, v_;
    double beta1_, beta2_, eps_, wd_;
    int t_ = 0;
};

// One training window: tokens has seq_len + 1 entries (inputs feed positions
// [0, n), targets are the same tokens shifted by one); lang_experts aligns
// with the inputs.
struct Window {
    std::vector<int> tokens;
    std::vector<int> lang_experts;
};

// Forward + mean next-token cross-entropy over the batch, one backward pass,
// one AdamW update. Returns the batch loss. A non-finite value surfaces as a
// NumericError carrying the step index and the layer scope of the first NaN.
template <class S>
double loss_step(const Model<S>& model, AdamW<S>& opt,
                 const std::vector<Window>& batch, int step,
                 const TrainConfig& cfg) {
    if (batch.empty()) throw ConfigError("loss_step: empty batch");
    Tape<S> tape;
    model.zero_grad();
    try {
        Tensor<S> total;
        for (const Window& w : batch) {
            const int n = static_cast<int>(w.tokens.size()) - 1;
            if (n < 1) throw ConfigError("loss_step: window too short");
            std::span<const int> inputs(w.tokens.data(), n);
            std::span<const int> targets(w.tokens.data() + 1, n);
            Tensor<S> logits = model_forward(tape, model, inputs, w.lang_experts);
            tape.set_scope("loss");
            Tensor<S> l = cross_entropy(tape, logits, targets);
            total = total.defined() ? add(tape, total, l) : l;
        }
        Tensor<S> loss =
            scale(tape, total, static_cast<S>(1.0 / batch.size()));
        tape.backward(loss);
        opt.step(lr_at(step, cfg.total_steps, cfg.lr_peak, cfg.warmup_prop));
        return static_cast<double>(loss.item());
    } catch (const NumericError& e) {
        throw NumericError("step " + std::to_string(step) + ": " + e.what());
    }
}

}  // namespace moelab
