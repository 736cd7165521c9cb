#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "moelab/pipeline.hpp"

namespace {

using namespace moelab;

std::string json_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            case '\r': out += "\\r"; break;
            default:
                if (static_cast<unsigned char>(c) < 0x20) {
                    char buf[8];
                    std::snprintf(buf, sizeof buf, "\\u%04x",
                                  static_cast<unsigned char>(c));
                    out += buf;
                } else {
                    out += c;
                }
        }
    }
    return out;
}

LanguageRegistry pick_registry(const std::string& name) {
    if (name == "desk6") return desk6_registry();
    if (name == "builtin") return LanguageRegistry::builtin();
    if (name.size() > 5 && name.substr(name.size() - 5) == ".json")
        return registry_from_specs(read_specs(name));
    return LanguageRegistry::from_tsv_file(name);
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir);
}

void require_file(const std::string& path, const std::string& what) {
    if (!std::filesystem::exists(path))
        throw ConfigError(what + " not found: " + path);
}

nlohmann::json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    try {
        nlohmann::json j;
        in >> j;
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

// ---------------------------------------------------------------------------
// corpus-gen

struct CorpusGenOpts {
    std::string out;
    std::string spec_path;
    std::uint64_t seed = 42;
    int docs = 2000;
    int low_docs = 200;
    std::string low_langs = "syn1,syn3,syn5";
    int doc_len = 128;
    int eval_docs = 100;
    CLI::App* cmd = nullptr;
};

void cmd_corpus_gen(const CorpusGenOpts& o) {
    std::vector<SyntheticLangSpec> specs =
        o.spec_path.empty() ? desk6_specs() : read_specs(o.spec_path);
    // The default low-resource list names built-in languages; it only applies
    // when the built-in spec is in use or the user asked for it explicitly.
    std::vector<std::string> low;
    if ((o.cmd && o.cmd->count("--low") > 0) || o.spec_path.empty())
        low = split_csv(o.low_langs);
    for (const std::string& code : low) {
        bool known = false;
        for (const auto& s : specs) known = known || s.code == code;
        if (!known) throw ConfigError("low-resource code not in spec: " + code);
    }
    if (o.docs < 1 || o.low_docs < 0 || o.low_docs > o.docs)
        throw ConfigError("need docs >= 1 and 0 <= low-docs <= docs");

    ensure_dir(o.out);
    auto corpus = gen_corpus(specs, o.docs, o.doc_len, o.seed);
    // Low-resource languages keep only their leading documents; per-document
    // seeding makes those identical to a smaller run's output.
    std::vector<CorpusDoc> train;
    std::map<std::string, int> kept;
    for (CorpusDoc& d : corpus) {
        const bool is_low =
            std::find(low.begin(), low.end(), d.lang) != low.end();
        if (is_low && kept[d.lang] >= o.low_docs) continue;
        ++kept[d.lang];
        train.push_back(std::move(d));
    }
    write_corpus(train, o.out + "/corpus.jsonl");
    if (o.eval_docs > 0) {
        auto eval = gen_corpus(specs, o.eval_docs, o.doc_len,
                               o.seed ^ 0x4556414cull);
        write_corpus(eval, o.out + "/eval.jsonl");
    }
    std::ofstream spec_out(o.out + "/spec.json", std::ios::trunc);
    if (!spec_out) throw IoError("cannot write " + o.out + "/spec.json");
    spec_out << specs_to_json(specs).dump(2) << "\n";
    std::printf("wrote %zu train docs (%d eval per language) to %s\n",
                train.size(), o.eval_docs, o.out.c_str());
}

// ---------------------------------------------------------------------------
// train

struct TrainOpts {
    std::string corpus;
    std::string out;
    std::string config_path;
    std::string preset = "desk";
    std::string strategy = "dense";
    std::string scheme = "per_language";
    std::string registry = "desk6";
    std::uint64_t seed = 42;
    int steps = -1;
    int windows_per_step = -1;
    int seq_len = -1;
    double lr = -1.0;
    int experts = 6;
    int k = 2;
    int n_last = -1;  // -1: every layer, when a MoE strategy is chosen
    int shared_expert = -1;
    // which flags were set on the command line (to override config file)
    CLI::App* cmd = nullptr;
};

struct ResolvedRun {
    ModelConfig model;
    TrainConfig train;
    std::optional<ExpertScheme> scheme;  // set when routing needs lang tags
};

// Applies everything except lr_peak, whose default depends on the resolved
// strategy; the caller layers lr sources in precedence order.
void apply_train_json(TrainConfig& t, const nlohmann::json& j) {
    try {
        if (j.contains("total_steps")) t.total_steps = j["total_steps"].get<int>();
        if (j.contains("windows_per_step"))
            t.windows_per_step = j["windows_per_step"].get<int>();
        if (j.contains("seq_len")) t.seq_len = j["seq_len"].get<int>();
        if (j.contains("warmup_prop")) t.warmup_prop = j["warmup_prop"].get<double>();
        if (j.contains("weight_decay"))
            t.weight_decay = j["weight_decay"].get<double>();
        if (j.contains("seed")) t.seed = j["seed"].get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("config train: ") + e.what());
    }
}

// Preset model and optimizer defaults. "paper-faithful" stores the published
// recipe (batch 32, sequence 4096, lr 1e-4 dense / 1e-5 MoE); running it at
// full width is possible but not something a desk machine finishes quickly.
void apply_preset(const std::string& preset, ModelConfig& model,
                  TrainConfig& train, double& lr_dense, double& lr_moe) {
    if (preset == "desk") {
        model = ModelConfig::desk();
        train = TrainConfig{};
        lr_dense = train.lr_peak;
        lr_moe = train.lr_peak;
    } else if (preset == "paper-faithful") {
        model.vocab_size = 151936;
        model.d_model = 896;
        model.n_heads = 14;
        model.n_layers = 24;
        model.d_ffn = 4864;
        model.max_seq_len = 4096;
        model.layer_kind.assign(24, LayerKind::Dense);
        train = TrainConfig{};
        train.windows_per_step = 32;
        train.seq_len = 4096;
        train.warmup_prop = 0.3;
        train.seed = 42;
        lr_dense = 1e-4;
        lr_moe = 1e-5;
    } else {
        throw ConfigError("unknown preset '" + preset + "'");
    }
}

ResolvedRun resolve_run(const TrainOpts& o) {
    ModelConfig model;
    TrainConfig train;
    double lr_dense = 1e-3, lr_moe = 1e-3;
    apply_preset(o.preset, model, train, lr_dense, lr_moe);

    std::string strategy = o.strategy;
    int experts = o.experts, k = o.k, n_last = o.n_last;
    int shared = o.shared_expert;
    std::string scheme = o.scheme;
    std::optional<double> lr_from_config;
    if (!o.config_path.empty()) {
        nlohmann::json j = load_json(o.config_path);
        if (j.contains("model")) model = model_config_from_json(j["model"]);
        if (j.contains("train")) apply_train_json(train, j["train"]);
        try {
            if (j.contains("train") && j["train"].contains("lr_peak"))
                lr_from_config = j["train"]["lr_peak"].get<double>();
            if (j.contains("strategy")) strategy = j["strategy"].get<std::string>();
            if (j.contains("experts")) experts = j["experts"].get<int>();
            if (j.contains("k")) k = j["k"].get<int>();
            if (j.contains("n_last")) n_last = j["n_last"].get<int>();
            if (j.contains("scheme")) scheme = j["scheme"].get<std::string>();
            if (j.contains("shared_expert"))
                shared = j["shared_expert"].get<int>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("config: ") + e.what());
        }
    }
    // Explicit flags beat both the preset and the config file.
    auto set = [&](const char* flag) {
        return o.cmd && o.cmd->count(flag) > 0;
    };
    if (set("--strategy")) strategy = o.strategy;
    if (set("--experts")) experts = o.experts;
    if (set("--k")) k = o.k;
    if (set("--n-last")) n_last = o.n_last;
    if (set("--scheme")) scheme = o.scheme;
    if (set("--shared-expert")) shared = o.shared_expert;
    if (set("--steps")) train.total_steps = o.steps;
    if (set("--windows-per-step")) train.windows_per_step = o.windows_per_step;
    if (set("--seq-len")) train.seq_len = o.seq_len;
    if (set("--seed")) train.seed = o.seed;

    ResolvedRun r;
    if (strategy == "dense") {
        model.layer_kind.assign(model.n_layers, LayerKind::Dense);
        model.moe.reset();
        train.lr_peak = lr_dense;
    } else {
        MoEConfig mc;
        mc.strategy = routing_from_string(strategy);
        mc.n_experts = experts;
        mc.k = k;
        mc.expert_scheme = scheme_from_string(scheme);
        if (shared >= 0) mc.shared_expert = shared;
        if (n_last < 0) n_last = model.n_layers;
        if (n_last > model.n_layers)
            throw ConfigError("n_last " + std::to_string(n_last) +
                              " exceeds n_layers " +
                              std::to_string(model.n_layers));
        model.layer_kind.assign(model.n_layers, LayerKind::Dense);
        for (int i = model.n_layers - n_last; i < model.n_layers; ++i)
            model.layer_kind[i] = LayerKind::MoE;
        model.moe = mc;
        train.lr_peak = lr_moe;
        if (mc.strategy == Routing::HybridK || mc.strategy == Routing::LangSpec)
            r.scheme = mc.expert_scheme;
    }
    if (lr_from_config) train.lr_peak = *lr_from_config;
    if (set("--lr")) train.lr_peak = o.lr;
    if (train.seq_len > model.max_seq_len)
        throw ConfigError("seq_len " + std::to_string(train.seq_len) +
                          " exceeds max_seq_len " +
                          std::to_string(model.max_seq_len));
    model.validate();
    train.validate();
    r.model = model;
    r.train = train;
    return r;
}

void cmd_train(const TrainOpts& o) {
    require_file(o.corpus, "corpus");
    ResolvedRun run = resolve_run(o);
    LanguageRegistry reg = pick_registry(o.registry);
    auto docs = read_corpus(o.corpus);
    auto windows = pack_windows(docs, reg, run.scheme, run.train.seq_len);

    ensure_dir(o.out);
    Model<double> m = build_model<double>(run.model, run.train.seed);
    const double final_loss =
        run_training(m, std::move(windows), run.train, o.out + "/loss_log.tsv");
    save_run(m, o.out);
    std::printf("trained %d steps, final loss %.6f, %lld params -> %s\n",
                run.train.total_steps, final_loss,
                static_cast<long long>(param_count(m).total), o.out.c_str());
}

// ---------------------------------------------------------------------------
// upcycle

struct UpcycleOpts {
    std::string model_dir;
    std::string out;
    std::string strategy = "topk";
    std::string scheme = "per_language";
    int n_last = 0;
    int experts = 6;
    int k = 2;
    int shared_expert = -1;
    std::uint64_t seed = 42;
};

void cmd_upcycle(const UpcycleOpts& o) {
    require_file(o.model_dir + "/config.json", "model config");
    require_file(o.model_dir + "/model.ckpt", "checkpoint");
    Model<double> dense = load_run<double>(o.model_dir);
    MoEConfig mc;
    mc.strategy = routing_from_string(o.strategy);
    mc.n_experts = o.experts;
    mc.k = o.k;
    mc.expert_scheme = scheme_from_string(o.scheme);
    if (o.shared_expert >= 0) mc.shared_expert = o.shared_expert;
    Model<double> moe = build_post_moe(dense, o.n_last, mc, o.seed);
    ensure_dir(o.out);
    save_run(moe, o.out);
    const ParamCount pc = param_count(moe);
    std::printf("upcycled last %d layers: %lld total / %lld active -> %s\n",
                o.n_last, static_cast<long long>(pc.total),
                static_cast<long long>(pc.active), o.out.c_str());
}

// ---------------------------------------------------------------------------
// route-trace

struct TraceOpts {
    std::string model_dir;
    std::string corpus;
    std::string out;
    std::string registry = "desk6";
    int max_docs = 0;  // 0: all
};

void cmd_route_trace(const TraceOpts& o) {
    require_file(o.model_dir + "/config.json", "model config");
    require_file(o.corpus, "corpus");
    Model<double> m = load_run<double>(o.model_dir);
    LanguageRegistry reg = pick_registry(o.registry);
    auto corpus = read_corpus(o.corpus);
    // Documents longer than the context window are traced in consecutive
    // chunks; --max-docs counts source documents, not chunks.
    const std::size_t cap = static_cast<std::size_t>(m.cfg.max_seq_len);
    std::vector<TraceDoc> docs;
    int taken = 0;
    for (const CorpusDoc& d : corpus) {
        if (o.max_docs > 0 && taken >= o.max_docs) break;
        ++taken;
        for (std::size_t off = 0; off < d.tokens.size(); off += cap)
            docs.push_back(
                {d.lang,
                 {d.tokens.begin() + off,
                  d.tokens.begin() +
                      std::min(off + cap, d.tokens.size())}});
    }
    RoutingTrace trace = record_trace(m, docs, reg);
    ensure_dir(o.out);
    write_trace(trace, o.out + "/trace.jsonl");
    std::printf("traced %zu tokens over %zu docs -> %s/trace.jsonl\n",
                trace.records.size(), docs.size(), o.out.c_str());
}

// ---------------------------------------------------------------------------
// circuit

struct CircuitOpts {
    std::string trace_path;
    std::string out;
    double threshold = 0.5;
    std::string lang;
};

void cmd_circuit(const CircuitOpts& o) {
    require_file(o.trace_path, "trace");
    RoutingTrace trace = read_trace(o.trace_path);
    std::optional<std::string> lang;
    if (!o.lang.empty()) lang = o.lang;
    LayerDistribution dist = layer_distribution(trace, lang);
    Circuit circuit = build_circuit(dist, trace, o.threshold, lang);

    ensure_dir(o.out);
    {
        std::ofstream out(o.out + "/distribution.tsv", std::ios::trunc);
        if (!out) throw IoError("cannot write " + o.out + "/distribution.tsv");
        out << "layer";
        for (int e = 0; e < trace.n_experts; ++e) out << "\te" << e;
        out << "\n";
        for (std::size_t i = 0; i < dist.layers.size(); ++i) {
            out << dist.layers[i];
            for (double r : dist.ratio[i]) out << "\t" << detail::fmt6(r);
            out << "\n";
        }
    }
    export_circuit(circuit, CircuitFormat::Json, o.out + "/circuit.json");
    export_circuit(circuit, CircuitFormat::Dot, o.out + "/circuit.dot");

    // Per-layer routing divergence across the languages present in the trace.
    std::map<std::string, RoutingTrace> by_lang;
    for (const TraceRecord& r : trace.records) {
        RoutingTrace& t = by_lang[r.lang];
        t.n_experts = trace.n_experts;
        t.k = trace.k;
        t.records.push_back(r);
    }
    std::ofstream div(o.out + "/divergence.tsv", std::ios::trunc);
    if (!div) throw IoError("cannot write " + o.out + "/divergence.tsv");
    div << "layer\tjsd\n";
    if (by_lang.size() >= 2) {
        std::vector<double> profile = divergence_profile(by_lang);
        for (std::size_t i = 0; i < profile.size(); ++i) {
            char buf[48];
            std::snprintf(buf, sizeof buf, "%d\t%.12g\n", dist.layers[i],
                          profile[i]);
            div << buf;
        }
    }
    std::printf("circuit: %zu nodes, %zu edges at threshold %g -> %s\n",
                circuit.nodes.size(), circuit.edges.size(), o.threshold,
                o.out.c_str());
}

// ---------------------------------------------------------------------------
// leak-check

struct LeakOpts {
    std::string train_path;
    std::string eval_path;
    std::string out;
    int min_len = 64;
};

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

void cmd_leak_check(const LeakOpts& o) {
    auto train = read_lines(o.train_path);
    auto eval = read_lines(o.eval_path);
    auto hits = detect_leakage(train, eval, o.min_len);
    ensure_dir(o.out);
    write_leakage_report(hits, o.out + "/leakage.jsonl");
    std::printf("flagged %zu of %zu train items (min_len %d) -> %s\n",
                hits.size(), train.size(), o.min_len, o.out.c_str());
}

// ---------------------------------------------------------------------------
// sweep

struct SweepOpts {
    std::string corpus;
    std::string eval_path;
    std::string out;
    std::string preset = "desk";
    std::string scheme = "per_language";
    std::string registry = "desk6";
    std::uint64_t seed = 42;
    int base_steps = 300;
    int steps = 200;
    int windows_per_step = 4;
    int seq_len = -1;
    int experts = 6;
    int k = 2;
};

void cmd_sweep(const SweepOpts& o) {
    require_file(o.corpus, "corpus");
    require_file(o.eval_path, "eval corpus");
    SweepConfig sc;
    double lr_dense = 1e-3, lr_moe = 1e-3;
    apply_preset(o.preset, sc.base_model, sc.base_train, lr_dense, lr_moe);
    sc.base_train.total_steps = o.base_steps;
    sc.base_train.windows_per_step = o.windows_per_step;
    if (o.seq_len > 0) sc.base_train.seq_len = o.seq_len;
    sc.base_train.seed = o.seed;
    sc.base_train.lr_peak = lr_dense;
    sc.tune_train = sc.base_train;
    sc.tune_train.total_steps = o.steps;
    sc.tune_train.lr_peak = lr_moe;
    sc.n_experts = o.experts;
    sc.k = o.k;
    sc.scheme = scheme_from_string(o.scheme);
    sc.out_dir = o.out;
    sc.threads = worker_count();

    LanguageRegistry reg = pick_registry(o.registry);
    auto rows = run_sweep(read_corpus(o.corpus), read_corpus(o.eval_path), reg,
                          sc);
    std::fputs(sweep_table(rows, reg.families()).c_str(), stdout);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale laboratory for multilingual MoE routing"};
    app.require_subcommand(1);

    CorpusGenOpts cg;
    CLI::App* cg_cmd = app.add_subcommand(
        "corpus-gen", "generate a synthetic multilingual corpus");
    cg_cmd->add_option("--out", cg.out, "output directory")->required();
    cg_cmd->add_option("--spec", cg.spec_path,
                       "language spec JSON (default: built-in 6-language set)");
    cg_cmd->add_option("--seed", cg.seed, "rng seed");
    cg_cmd->add_option("--docs", cg.docs, "docs per high-resource language");
    cg_cmd->add_option("--low-docs", cg.low_docs,
                       "docs per low-resource language");
    cg_cmd->add_option("--low", cg.low_langs,
                       "comma-separated low-resource codes");
    cg_cmd->add_option("--doc-len", cg.doc_len, "tokens per document");
    cg_cmd->add_option("--eval-docs", cg.eval_docs,
                       "held-out docs per language (0 disables)");
    cg.cmd = cg_cmd;

    TrainOpts tr;
    CLI::App* tr_cmd = app.add_subcommand("train", "train a model");
    tr_cmd->add_option("--corpus", tr.corpus, "corpus JSONL")->required();
    tr_cmd->add_option("--out", tr.out, "output directory")->required();
    tr_cmd->add_option("--config", tr.config_path, "run config JSON");
    tr_cmd->add_option("--preset", tr.preset, "desk | paper-faithful");
    tr_cmd->add_option("--strategy", tr.strategy,
                       "dense | topk | hybridk | langspec | densefull");
    tr_cmd->add_option("--scheme", tr.scheme, "per_language | per_family");
    tr_cmd->add_option("--registry", tr.registry,
                       "desk6 | builtin | TSV path");
    tr_cmd->add_option("--seed", tr.seed, "rng seed");
    tr_cmd->add_option("--steps", tr.steps, "training steps");
    tr_cmd->add_option("--windows-per-step", tr.windows_per_step,
                       "windows per optimizer step");
    tr_cmd->add_option("--seq-len", tr.seq_len, "window length");
    tr_cmd->add_option("--lr", tr.lr, "peak learning rate");
    tr_cmd->add_option("--experts", tr.experts, "expert count E");
    tr_cmd->add_option("--k", tr.k, "experts active per token");
    tr_cmd->add_option("--n-last", tr.n_last,
                       "MoE in the last N layers only (default: all)");
    tr_cmd->add_option("--shared-expert", tr.shared_expert,
                       "shared expert index (langspec)");
    tr.cmd = tr_cmd;

    UpcycleOpts up;
    CLI::App* up_cmd =
        app.add_subcommand("upcycle", "convert a dense run into an MoE");
    up_cmd->add_option("--model", up.model_dir, "dense run directory")
        ->required();
    up_cmd->add_option("--out", up.out, "output directory")->required();
    up_cmd->add_option("--n-last", up.n_last, "layers to convert")->required();
    up_cmd->add_option("--strategy", up.strategy,
                       "topk | hybridk | langspec | densefull");
    up_cmd->add_option("--scheme", up.scheme, "per_language | per_family");
    up_cmd->add_option("--experts", up.experts, "expert count E");
    up_cmd->add_option("--k", up.k, "experts active per token");
    up_cmd->add_option("--shared-expert", up.shared_expert,
                       "shared expert index (langspec)");
    up_cmd->add_option("--seed", up.seed, "router init seed");

    TraceOpts rt;
    CLI::App* rt_cmd =
        app.add_subcommand("route-trace", "record expert routing per token");
    rt_cmd->add_option("--model", rt.model_dir, "MoE run directory")
        ->required();
    rt_cmd->add_option("--corpus", rt.corpus, "corpus JSONL")->required();
    rt_cmd->add_option("--out", rt.out, "output directory")->required();
    rt_cmd->add_option("--registry", rt.registry, "desk6 | builtin | TSV path");
    rt_cmd->add_option("--max-docs", rt.max_docs, "cap documents (0: all)");

    CircuitOpts ci;
    CLI::App* ci_cmd = app.add_subcommand(
        "circuit", "extract the information-flow circuit from a trace");
    ci_cmd->add_option("--trace", ci.trace_path, "trace JSONL")->required();
    ci_cmd->add_option("--out", ci.out, "output directory")->required();
    ci_cmd->add_option("--threshold", ci.threshold, "token-ratio threshold");
    ci_cmd->add_option("--lang", ci.lang, "restrict to one language");

    LeakOpts lk;
    CLI::App* lk_cmd = app.add_subcommand(
        "leak-check", "flag train items overlapping the eval set");
    lk_cmd->add_option("--train", lk.train_path, "train items, one per line")
        ->required();
    lk_cmd->add_option("--eval", lk.eval_path, "eval items, one per line")
        ->required();
    lk_cmd->add_option("--out", lk.out, "output directory")->required();
    lk_cmd->add_option("--min-len", lk.min_len, "overlap threshold (scalars)");

    SweepOpts sw;
    CLI::App* sw_cmd = app.add_subcommand(
        "sweep", "strategy x depth grid with held-out evaluation");
    sw_cmd->add_option("--corpus", sw.corpus, "train corpus JSONL")->required();
    sw_cmd->add_option("--eval", sw.eval_path, "eval corpus JSONL")->required();
    sw_cmd->add_option("--out", sw.out, "output directory")->required();
    sw_cmd->add_option("--preset", sw.preset, "desk | paper-faithful");
    sw_cmd->add_option("--scheme", sw.scheme, "per_language | per_family");
    sw_cmd->add_option("--registry", sw.registry, "desk6 | builtin | TSV path");
    sw_cmd->add_option("--seed", sw.seed, "rng seed");
    sw_cmd->add_option("--base-steps", sw.base_steps, "dense base steps");
    sw_cmd->add_option("--steps", sw.steps, "continuation steps per cell");
    sw_cmd->add_option("--windows-per-step", sw.windows_per_step,
                       "windows per optimizer step");
    sw_cmd->add_option("--seq-len", sw.seq_len, "window length");
    sw_cmd->add_option("--experts", sw.experts, "expert count E");
    sw_cmd->add_option("--k", sw.k, "experts active per token");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        std::fprintf(stderr, "{\"error\":\"usage\",\"message\":\"%s\"}\n",
                     json_escape(e.what()).c_str());
        return 2;
    }

    try {
        if (app.got_subcommand(cg_cmd)) cmd_corpus_gen(cg);
        if (app.got_subcommand(tr_cmd)) cmd_train(tr);
        if (app.got_subcommand(up_cmd)) cmd_upcycle(up);
        if (app.got_subcommand(rt_cmd)) cmd_route_trace(rt);
        if (app.got_subcommand(ci_cmd)) cmd_circuit(ci);
        if (app.got_subcommand(lk_cmd)) cmd_leak_check(lk);
        if (app.got_subcommand(sw_cmd)) cmd_sweep(sw);
        return 0;
    } catch (const Error& e) {
        std::fprintf(stderr, "{\"error\":\"%s\",\"message\":\"%s\"}\n",
                     e.kind().c_str(), json_escape(e.what()).c_str());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "{\"error\":\"internal\",\"message\":\"%s\"}\n",
                     json_escape(e.what()).c_str());
        return 1;
    }
}
