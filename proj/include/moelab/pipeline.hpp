#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"
#include "moelab/checkpoint.hpp"
#include "moelab/circuits.hpp"
#include "moelab/corpus.hpp"
#include "moelab/trainer.hpp"
#include "moelab/upcycle.hpp"

namespace moelab {

// ---------------------------------------------------------------------------
// Model config files. config.json sits next to model.ckpt so a run directory
// is self-describing; layer kinds are packed into a D/M string.

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    nlohmann::json j;
    j["vocab_size"] = c.vocab_size;
    j["d_model"] = c.d_model;
    j["n_heads"] = c.n_heads;
    j["n_layers"] = c.n_layers;
    j["d_ffn"] = c.d_ffn;
    j["max_seq_len"] = c.max_seq_len;
    std::string kinds;
    for (LayerKind k : c.layer_kind) kinds += k == LayerKind::MoE ? 'M' : 'D';
    j["layer_kind"] = kinds;
    if (c.moe) {
        nlohmann::json m;
        m["n_experts"] = c.moe->n_experts;
        m["k"] = c.moe->k;
        m["strategy"] = to_string(c.moe->strategy);
        m["scheme"] = to_string(c.moe->expert_scheme);
        if (c.moe->shared_expert) m["shared_expert"] = *c.moe->shared_expert;
        j["moe"] = m;
    }
    return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.vocab_size = j.at("vocab_size").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.n_layers = j.at("n_layers").get<int>();
        c.d_ffn = j.at("d_ffn").get<int>();
        c.max_seq_len = j.at("max_seq_len").get<int>();
        const std::string kinds = j.at("layer_kind").get<std::string>();
        for (char k : kinds) {
            if (k != 'D' && k != 'M')
                throw FormatError("config: layer_kind must be D/M letters");
            c.layer_kind.push_back(k == 'M' ? LayerKind::MoE : LayerKind::Dense);
        }
        if (j.contains("moe")) {
            const nlohmann::json& m = j.at("moe");
            MoEConfig mc;
            mc.n_experts = m.at("n_experts").get<int>();
            mc.k = m.at("k").get<int>();
            mc.strategy = routing_from_string(m.at("strategy").get<std::string>());
            mc.expert_scheme = scheme_from_string(m.at("scheme").get<std::string>());
            if (m.contains("shared_expert"))
                mc.shared_expert = m.at("shared_expert").get<int>();
            c.moe = mc;
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

inline void write_model_config(const ModelConfig& c, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << model_config_to_json(c).dump(2) << "\n";
}

inline ModelConfig read_model_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    return model_config_from_json(j);
}

// A run directory bundles weights and the config needed to rebuild them.
template <class S>
void save_run(const Model<S>& m, const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    write_model_config(m.cfg, dir + "/config.json");
    save_checkpoint(m, dir + "/model.ckpt");
}

template <class S = double>
Model<S> load_run(const std::string& dir) {
    ModelConfig cfg = read_model_config(dir + "/config.json");
    Model<S> m = build_model<S>(cfg, 0);
    load_checkpoint(m, dir + "/model.ckpt");
    return m;
}

// ---------------------------------------------------------------------------
// Corpus spec files.

inline nlohmann::json specs_to_json(const std::vector<SyntheticLangSpec>& specs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const SyntheticLangSpec& s : specs) {
        nlohmann::json j;
        j["code"] = s.code;
        j["family"] = s.family;
        j["private_range"] = {s.private_range.lo, s.private_range.hi};
        j["family_range"] = {s.family_range.lo, s.family_range.hi};
        j["anchor_range"] = {s.anchor_range.lo, s.anchor_range.hi};
        j["w_private"] = s.w_private;
        j["w_family"] = s.w_family;
        j["w_anchor"] = s.w_anchor;
        arr.push_back(j);
    }
    return arr;
}

inline std::vector<SyntheticLangSpec> specs_from_json(const nlohmann::json& arr) {
    std::vector<SyntheticLangSpec> specs;
    try {
        for (const nlohmann::json& j : arr) {
            SyntheticLangSpec s;
            s.code = j.at("code").get<std::string>();
            s.family = j.at("family").get<std::string>();
            auto range = [&](const char* key) {
                const nlohmann::json& r = j.at(key);
                if (!r.is_array() || r.size() != 2)
                    throw FormatError(std::string("spec: ") + key +
                                      " must be [lo, hi]");
                return TokenRange{r[0].get<int>(), r[1].get<int>()};
            };
            s.private_range = range("private_range");
            s.family_range = range("family_range");
            s.anchor_range = range("anchor_range");
            s.w_private = j.at("w_private").get<double>();
            s.w_family = j.at("w_family").get<double>();
            s.w_anchor = j.at("w_anchor").get<double>();
            specs.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("spec: ") + e.what());
    }
    validate_specs(specs);
    return specs;
}

inline std::vector<SyntheticLangSpec> read_specs(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    return specs_from_json(j);
}

// Registry implied by a spec list: every language is per-language eligible.
inline LanguageRegistry registry_from_specs(
    const std::vector<SyntheticLangSpec>& specs) {
    std::vector<LanguageEntry> entries;
    std::vector<std::string> codes;
    for (const SyntheticLangSpec& s : specs) {
        entries.push_back({s.code, s.code, s.family});
        codes.push_back(s.code);
    }
    return LanguageRegistry(entries, codes);
}

// ---------------------------------------------------------------------------
// Window packing: concatenate same-language documents into one stream (in
// file order), then cut non-overlapping seq_len+1 slices. Tails are dropped.

inline std::vector<Window> pack_windows(const std::vector<CorpusDoc>& docs,
                                        const LanguageRegistry& reg,
                                        std::optional<ExpertScheme> scheme,
                                        int seq_len) {
    if (seq_len < 1) throw ConfigError("pack: seq_len must be >= 1");
    std::vector<std::string> order;
    std::map<std::string, std::vector<int>> streams;
    for (const CorpusDoc& d : docs) {
        if (!streams.count(d.lang)) order.push_back(d.lang);
        auto& s = streams[d.lang];
        s.insert(s.end(), d.tokens.begin(), d.tokens.end());
    }
    std::vector<Window> windows;
    const std::size_t step = static_cast<std::size_t>(seq_len) + 1;
    for (const std::string& lang : order) {
        const int tag = scheme ? reg.expert_of(lang, *scheme) : -1;
        const std::vector<int>& s = streams[lang];
        for (std::size_t off = 0; off + step <= s.size(); off += step) {
            Window w;
            w.tokens.assign(s.begin() + off, s.begin() + off + step);
            if (scheme) w.lang_experts.assign(seq_len, tag);
            windows.push_back(std::move(w));
        }
    }
    return windows;
}

// Same packing, but remembers each window's language for grouped evaluation.
inline std::vector<std::pair<std::string, Window>> pack_windows_by_lang(
    const std::vector<CorpusDoc>& docs, const LanguageRegistry& reg,
    std::optional<ExpertScheme> scheme, int seq_len) {
    std::vector<std::pair<std::string, Window>> out;
    std::vector<std::string> order;
    std::map<std::string, std::vector<CorpusDoc>> by_lang;
    for (const CorpusDoc& d : docs) {
        if (!by_lang.count(d.lang)) order.push_back(d.lang);
        by_lang[d.lang].push_back(d);
    }
    for (const std::string& lang : order)
        for (Window& w : pack_windows(by_lang[lang], reg, scheme, seq_len))
            out.emplace_back(lang, std::move(w));
    return out;
}

// ---------------------------------------------------------------------------
// Training driver. Windows are shuffled once under the run seed and consumed
// cyclically; the loss log holds "step\tloss\tlr" lines and nothing else, so
// identical runs produce identical bytes.

template <class S>
double run_training(const Model<S>& m, std::vector<Window> windows,
                    const TrainConfig& cfg, const std::string& log_path) {
    cfg.validate();
    if (windows.empty())
        throw ConfigError("train: corpus yields no windows at this seq_len");
    Rng order = Rng(cfg.seed).fork(0x57494e44ull);
    for (std::size_t i = windows.size(); i > 1; --i)
        std::swap(windows[i - 1], windows[order.next_below(i)]);

    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path, std::ios::trunc);
        if (!log) throw IoError("cannot write " + log_path);
    }
    AdamW<S> opt(m.params(), cfg);
    double last = 0.0;
    std::size_t cursor = 0;
    std::vector<Window> batch;
    for (int step = 1; step <= cfg.total_steps; ++step) {
        batch.clear();
        for (int w = 0; w < cfg.windows_per_step; ++w) {
            batch.push_back(windows[cursor]);
            cursor = (cursor + 1) % windows.size();
        }
        last = loss_step(m, opt, batch, step, cfg);
        if (log.is_open()) {
            char line[96];
            std::snprintf(line, sizeof line, "%d\t%.12g\t%.12g\n", step, last,
                          lr_at(step, cfg.total_steps, cfg.lr_peak,
                                cfg.warmup_prop));
            log << line;
        }
    }
    return last;
}

// Forward-only cross-entropy of one window.
template <class S>
double window_ce(const Model<S>& m, const Window& w) {
    const int n = static_cast<int>(w.tokens.size()) - 1;
    if (n < 1) throw ConfigError("eval: window too short");
    Tape<S> tape;
    tape.set_recording(false);
    std::span<const int> inputs(w.tokens.data(), n);
    std::span<const int> targets(w.tokens.data() + 1, n);
    Tensor<S> logits = model_forward(tape, m, inputs, w.lang_experts);
    return static_cast<double>(cross_entropy(tape, logits, targets).item());
}

// Mean held-out cross-entropy per language family.
template <class S>
std::map<std::string, double> eval_by_family(
    const Model<S>& m, const std::vector<CorpusDoc>& docs,
    const LanguageRegistry& reg, std::optional<ExpertScheme> scheme,
    int seq_len) {
    std::map<std::string, double> sum;
    std::map<std::string, int> count;
    for (const auto& [lang, w] :
         pack_windows_by_lang(docs, reg, scheme, seq_len)) {
        const std::string fam = reg.family_of(lang);
        sum[fam] += window_ce(m, w);
        count[fam] += 1;
    }
    std::map<std::string, double> mean;
    for (const auto& [fam, s] : sum) mean[fam] = s / count[fam];
    return mean;
}

// ---------------------------------------------------------------------------
// Worker cap: MOELAB_THREADS wins when set, hardware concurrency otherwise.

inline int worker_count() {
    if (const char* env = std::getenv("MOELAB_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || v < 1)
            throw ConfigError("MOELAB_THREADS must be a positive integer");
        return static_cast<int>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
}

namespace detail {

// Run jobs on up to n_threads workers; first exception wins and is rethrown.
inline void run_jobs(std::vector<std::function<void()>>& jobs, int n_threads) {
    const int n = std::min<int>(n_threads, static_cast<int>(jobs.size()));
    if (n <= 1) {
        for (auto& j : jobs) j();
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr err;
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            try {
                jobs[i]();
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!err) err = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < n; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Strategy x depth sweep. One dense base model is trained first; every cell
// continues from it (the dense cell trains on unchanged, MoE cells upcycle
// the last N layers, then train on). Rows with N=0 and all rows of the dense
// strategy describe the same continued-dense run, so 20 rows cost 13 runs.

struct SweepConfig {
    ModelConfig base_model;       // dense architecture
    TrainConfig base_train;       // phase 1: dense pre-training
    TrainConfig tune_train;       // phase 2: per-cell continuation
    int n_experts = 6;
    int k = 2;
    ExpertScheme scheme = ExpertScheme::PerLanguage;
    std::vector<int> depths = {0, 1, 2, 3, 4};
    std::string out_dir;          // empty: keep everything in memory
    int threads = 1;
};

struct SweepRow {
    std::string strategy;  // "dense", "topk", "hybridk", "langspec"
    int n_last = 0;
    double train_loss = 0.0;
    std::map<std::string, double> family_ce;
};

inline std::string sweep_table(const std::vector<SweepRow>& rows,
                               const std::vector<std::string>& families) {
    std::string out = "strategy\tn_last\ttrain_loss";
    for (const std::string& f : families) out += "\tce_" + f;
    out += "\n";
    for (const SweepRow& r : rows) {
        char buf[64];
        out += r.strategy + "\t" + std::to_string(r.n_last);
        std::snprintf(buf, sizeof buf, "\t%.12g", r.train_loss);
        out += buf;
        for (const std::string& f : families) {
            auto it = r.family_ce.find(f);
            std::snprintf(buf, sizeof buf, "\t%.12g",
                          it == r.family_ce.end() ? std::nan("") : it->second);
            out += buf;
        }
        out += "\n";
    }
    return out;
}

inline std::vector<SweepRow> run_sweep(const std::vector<CorpusDoc>& train_docs,
                                       const std::vector<CorpusDoc>& eval_docs,
                                       const LanguageRegistry& reg,
                                       const SweepConfig& sc) {
    sc.base_model.validate();
    if (sc.base_model.n_moe_layers() != 0)
        throw ConfigError("sweep: base model must be dense");
    for (int n : sc.depths)
        if (n < 0 || n > sc.base_model.n_layers)
            throw ConfigError("sweep: depth out of [0, n_layers]");

    const auto out_path = [&](const std::string& leaf) {
        return sc.out_dir.empty() ? std::string() : sc.out_dir + "/" + leaf;
    };
    if (!sc.out_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(sc.out_dir + "/cells", ec);
    }

    // Phase 1: the shared dense base.
    Model<double> base = build_model<double>(sc.base_model, sc.base_train.seed);
    run_training(base,
                 pack_windows(train_docs, reg, std::nullopt,
                              sc.base_train.seq_len),
                 sc.base_train, out_path("base_loss_log.tsv"));
    if (!sc.out_dir.empty()) save_run(base, sc.out_dir + "/base");

    struct Cell {
        Routing strategy;
        int n_last = 0;  // 0 stands for the continued-dense run
    };
    std::vector<Cell> cells;
    cells.push_back({Routing::TopK, 0});  // strategy unused for the dense cell
    std::vector<Routing> strategies{Routing::TopK, Routing::HybridK,
                                    Routing::LangSpec};
    for (Routing s : strategies)
        for (int n : sc.depths)
            if (n > 0) cells.push_back({s, n});

    std::vector<double> cell_loss(cells.size());
    std::vector<std::map<std::string, double>> cell_ce(cells.size());
    std::vector<std::function<void()>> jobs;
    for (std::size_t ci = 0; ci < cells.size(); ++ci)
        jobs.push_back([&, ci]() {
            const Cell cell = cells[ci];
            const bool dense = cell.n_last == 0;
            Model<double> m = [&]() {
                if (dense) return base.clone(true);
                MoEConfig mc;
                mc.strategy = cell.strategy;
                // The language-specific baseline adds an always-on shared
                // expert on top of the language experts.
                mc.n_experts = cell.strategy == Routing::LangSpec
                                   ? sc.n_experts + 1
                                   : sc.n_experts;
                mc.k = sc.k;
                mc.expert_scheme = sc.scheme;
                if (cell.strategy == Routing::LangSpec)
                    mc.shared_expert = sc.n_experts;
                return build_post_moe(base, cell.n_last, mc,
                                      sc.tune_train.seed + 1000 * ci);
            }();
            const bool needs_tags =
                !dense && (cell.strategy == Routing::HybridK ||
                           cell.strategy == Routing::LangSpec);
            std::optional<ExpertScheme> scheme;
            if (needs_tags) scheme = sc.scheme;
            const std::string name =
                dense ? "dense"
                      : to_string(cell.strategy) + "-n" +
                            std::to_string(cell.n_last);
            const std::string cell_dir = out_path("cells/" + name);
            if (!cell_dir.empty()) {
                std::error_code ec;
                std::filesystem::create_directories(cell_dir, ec);
            }
            cell_loss[ci] = run_training(
                m, pack_windows(train_docs, reg, scheme, sc.tune_train.seq_len),
                sc.tune_train,
                cell_dir.empty() ? std::string() : cell_dir + "/loss_log.tsv");
            if (!cell_dir.empty()) save_run(m, cell_dir);
            cell_ce[ci] =
                eval_by_family(m, eval_docs, reg, scheme, sc.tune_train.seq_len);
        });
    detail::run_jobs(jobs, sc.threads);

    // Assemble the full grid; N=0 rows and the dense strategy reuse cell 0.
    std::map<std::pair<Routing, int>, std::size_t> by_cell;
    for (std::size_t ci = 1; ci < cells.size(); ++ci)
        by_cell[{cells[ci].strategy, cells[ci].n_last}] = ci;
    std::vector<SweepRow> rows;
    auto push_row = [&](const std::string& strategy, int n, std::size_t ci) {
        rows.push_back({strategy, n, cell_loss[ci], cell_ce[ci]});
    };
    for (int n : sc.depths) push_row("dense", n, 0);
    for (Routing s : strategies)
        for (int n : sc.depths)
            push_row(to_string(s), n, n == 0 ? 0 : by_cell.at({s, n}));
    if (!sc.out_dir.empty()) {
        std::ofstream out(sc.out_dir + "/summary.tsv", std::ios::trunc);
        if (!out) throw IoError("cannot write " + sc.out_dir + "/summary.tsv");
        out << sweep_table(rows, reg.families());
    }
    return rows;
}

}  // namespace moelab
