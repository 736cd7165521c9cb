#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "moelab/pipeline.hpp"

using namespace moelab;

namespace {

ModelConfig micro_model() {
    ModelConfig c;
    c.vocab_size = 512;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = 2;
    c.d_ffn = 16;
    c.max_seq_len = 16;
    c.layer_kind.assign(2, LayerKind::Dense);
    return c;
}

TrainConfig micro_train(int steps) {
    TrainConfig t;
    t.total_steps = steps;
    t.windows_per_step = 1;
    t.seq_len = 8;
    t.lr_peak = 1e-3;
    t.seed = 42;
    return t;
}

}  // namespace

TEST_CASE("model config json round-trips every field") {
    ModelConfig c = micro_model();
    c.layer_kind = {LayerKind::Dense, LayerKind::MoE};
    MoEConfig mc;
    mc.n_experts = 7;
    mc.k = 2;
    mc.strategy = Routing::LangSpec;
    mc.shared_expert = 6;
    mc.expert_scheme = ExpertScheme::PerFamily;
    c.moe = mc;

    ModelConfig back = model_config_from_json(model_config_to_json(c));
    CHECK(back.vocab_size == c.vocab_size);
    CHECK(back.d_model == c.d_model);
    CHECK(back.n_heads == c.n_heads);
    CHECK(back.n_layers == c.n_layers);
    CHECK(back.d_ffn == c.d_ffn);
    CHECK(back.max_seq_len == c.max_seq_len);
    CHECK(back.layer_kind == c.layer_kind);
    REQUIRE(back.moe.has_value());
    CHECK(back.moe->n_experts == 7);
    CHECK(back.moe->k == 2);
    CHECK(back.moe->strategy == Routing::LangSpec);
    CHECK(back.moe->shared_expert == 6);
    CHECK(back.moe->expert_scheme == ExpertScheme::PerFamily);

    ModelConfig dense = micro_model();
    ModelConfig dback = model_config_from_json(model_config_to_json(dense));
    CHECK(!dback.moe.has_value());
    CHECK(model_config_to_json(dense)["layer_kind"] == "DD");

    nlohmann::json bad = model_config_to_json(dense);
    bad["layer_kind"] = "DX";
    CHECK_THROWS_AS(model_config_from_json(bad), FormatError);
    bad = model_config_to_json(dense);
    bad.erase("d_model");
    CHECK_THROWS_AS(model_config_from_json(bad), FormatError);
}

TEST_CASE("spec json round-trips the desk preset") {
    auto specs = desk6_specs();
    auto back = specs_from_json(specs_to_json(specs));
    REQUIRE(back.size() == specs.size());
    for (std::size_t i = 0; i < specs.size(); ++i) {
        CHECK(back[i].code == specs[i].code);
        CHECK(back[i].family == specs[i].family);
        CHECK(back[i].private_range.lo == specs[i].private_range.lo);
        CHECK(back[i].private_range.hi == specs[i].private_range.hi);
        CHECK(back[i].family_range.lo == specs[i].family_range.lo);
        CHECK(back[i].anchor_range.hi == specs[i].anchor_range.hi);
        CHECK(back[i].w_private == specs[i].w_private);
    }
    // Invalid layouts are rejected on load, not just on use.
    nlohmann::json j = specs_to_json(specs);
    j[1]["private_range"] = {specs[0].private_range.lo,
                             specs[0].private_range.hi};
    CHECK_THROWS_AS(specs_from_json(j), SpecError);

    LanguageRegistry reg = registry_from_specs(specs);
    CHECK(reg.entries().size() == 6);
    CHECK(reg.n_experts(ExpertScheme::PerLanguage) == 6);
    CHECK(reg.family_of("syn3") == "famB");
}

TEST_CASE("window packing cuts per-language streams") {
    LanguageRegistry reg = desk6_registry();
    std::vector<CorpusDoc> docs;
    std::vector<int> a(10), b(10), c(7);
    for (int i = 0; i < 10; ++i) a[i] = i;
    for (int i = 0; i < 10; ++i) b[i] = 100 + i;
    for (int i = 0; i < 7; ++i) c[i] = 200 + i;
    docs.push_back({"syn0", a});
    docs.push_back({"syn2", c});  // interleaved: stream order is appearance
    docs.push_back({"syn0", b});

    auto windows = pack_windows(docs, reg, std::nullopt, 4);
    // syn0 stream has 20 tokens -> 4 windows of 5; syn2 has 7 -> 1 window.
    REQUIRE(windows.size() == 5);
    CHECK(windows[0].tokens == std::vector<int>{0, 1, 2, 3, 4});
    CHECK(windows[1].tokens == std::vector<int>{5, 6, 7, 8, 9});
    CHECK(windows[2].tokens == std::vector<int>{100, 101, 102, 103, 104});
    CHECK(windows[3].tokens == std::vector<int>{105, 106, 107, 108, 109});
    CHECK(windows[4].tokens == std::vector<int>{200, 201, 202, 203, 204});
    for (const Window& w : windows) CHECK(w.lang_experts.empty());

    auto tagged = pack_windows(docs, reg, ExpertScheme::PerLanguage, 4);
    REQUIRE(tagged.size() == 5);
    CHECK(tagged[0].lang_experts == std::vector<int>{0, 0, 0, 0});
    CHECK(tagged[4].lang_experts == std::vector<int>{2, 2, 2, 2});

    auto labeled = pack_windows_by_lang(docs, reg, std::nullopt, 4);
    REQUIRE(labeled.size() == 5);
    CHECK(labeled[0].first == "syn0");
    CHECK(labeled[4].first == "syn2");
    CHECK(labeled[4].second.tokens == windows[4].tokens);

    CHECK_THROWS_AS(pack_windows(docs, reg, std::nullopt, 0), ConfigError);
}

TEST_CASE("run_training writes a parsable log and is bit-deterministic") {
    auto specs = desk6_specs();
    auto corpus = gen_corpus(specs, 6, 27, 3);
    LanguageRegistry reg = desk6_registry();
    TrainConfig tc = micro_train(7);

    auto run_once = [&](const std::string& log) {
        Model<double> m = build_model<double>(micro_model(), 11);
        run_training(m, pack_windows(corpus, reg, std::nullopt, tc.seq_len),
                     tc, log);
        return m;
    };
    Model<double> m1 = run_once("pipe_log_1.tsv");
    Model<double> m2 = run_once("pipe_log_2.tsv");

    auto slurp = [](const std::string& p) {
        std::ifstream in(p, std::ios::binary);
        std::stringstream buf;
        buf << in.rdbuf();
        return buf.str();
    };
    const std::string log = slurp("pipe_log_1.tsv");
    CHECK(log == slurp("pipe_log_2.tsv"));

    int lines = 0, step = 0;
    double loss = 0, lr = 0;
    std::stringstream ss(log);
    std::string line;
    while (std::getline(ss, line)) {
        ++lines;
        REQUIRE(std::sscanf(line.c_str(), "%d\t%lf\t%lf", &step, &loss, &lr) ==
                3);
        CHECK(step == lines);
        CHECK(std::isfinite(loss));
        CHECK(lr >= 0.0);
    }
    CHECK(lines == 7);

    auto p1 = m1.params(), p2 = m2.params();
    REQUIRE(p1.size() == p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i)
        CHECK(p1[i].values() == p2[i].values());
    std::remove("pipe_log_1.tsv");
    std::remove("pipe_log_2.tsv");

    Model<double> m = build_model<double>(micro_model(), 11);
    CHECK_THROWS_AS(run_training(m, {}, tc, ""), ConfigError);
}

TEST_CASE("window_ce equals the recorded-tape loss") {
    Model<double> m = build_model<double>(micro_model(), 19);
    Window w;
    w.tokens = {5, 9, 2, 88, 40, 7, 311, 6, 13};
    const double fast = window_ce(m, w);

    Tape<double> tape;
    std::span<const int> inputs(w.tokens.data(), 8);
    std::span<const int> targets(w.tokens.data() + 1, 8);
    Tensor<double> logits = model_forward(tape, m, inputs, w.lang_experts);
    const double slow = cross_entropy(tape, logits, targets).item();
    CHECK(fast == slow);
}

TEST_CASE("eval_by_family averages window losses inside each family") {
    auto specs = desk6_specs();
    auto docs = gen_corpus(specs, 2, 18, 21);
    LanguageRegistry reg = desk6_registry();
    Model<double> m = build_model<double>(micro_model(), 23);

    auto by_fam = eval_by_family(m, docs, reg, std::nullopt, 8);
    REQUIRE(by_fam.size() == 3);
    for (const std::string fam : {"famA", "famB", "famC"})
        CHECK(by_fam.count(fam) == 1);

    // famA = syn0 + syn1; each lang has 2 docs x 18 tokens -> 4 windows of 9.
    double want = 0.0;
    int n = 0;
    for (const auto& [lang, w] :
         pack_windows_by_lang(docs, reg, std::nullopt, 8))
        if (reg.family_of(lang) == "famA") {
            want += window_ce(m, w);
            ++n;
        }
    CHECK(n == 8);
    CHECK(by_fam["famA"] == doctest::Approx(want / n).epsilon(1e-15));
}

TEST_CASE("worker count respects MOELAB_THREADS") {
    setenv("MOELAB_THREADS", "3", 1);
    CHECK(worker_count() == 3);
    setenv("MOELAB_THREADS", "0", 1);
    CHECK_THROWS_AS(worker_count(), ConfigError);
    setenv("MOELAB_THREADS", "two", 1);
    CHECK_THROWS_AS(worker_count(), ConfigError);
    unsetenv("MOELAB_THREADS");
    CHECK(worker_count() >= 1);
}

TEST_CASE("sweep emits the full strategy-depth grid") {
    auto specs = desk6_specs();
    auto train_docs = gen_corpus(specs, 4, 9, 33);
    auto eval_docs = gen_corpus(specs, 1, 9, 34);
    LanguageRegistry reg = desk6_registry();

    SweepConfig sc;
    sc.base_model = micro_model();
    sc.base_train = micro_train(3);
    sc.tune_train = micro_train(2);
    sc.depths = {0, 1, 2};
    sc.threads = 2;

    auto rows = run_sweep(train_docs, eval_docs, reg, sc);
    REQUIRE(rows.size() == 12);  // 4 strategies x 3 depths

    // Row order: dense block first, then each MoE strategy in depth order.
    CHECK(rows[0].strategy == "dense");
    CHECK(rows[2].strategy == "dense");
    CHECK(rows[3].strategy == "topk");
    CHECK(rows[3].n_last == 0);
    CHECK(rows[11].strategy == "langspec");
    CHECK(rows[11].n_last == 2);

    // Dense rows and every N=0 row describe the same continued run.
    for (int i = 1; i < 3; ++i) {
        CHECK(rows[i].train_loss == rows[0].train_loss);
        CHECK(rows[i].family_ce == rows[0].family_ce);
    }
    for (int i : {3, 6, 9}) {
        CHECK(rows[i].n_last == 0);
        CHECK(rows[i].train_loss == rows[0].train_loss);
    }
    // MoE cells actually trained something different.
    CHECK(rows[4].train_loss != rows[0].train_loss);
    for (const SweepRow& r : rows) {
        CHECK(std::isfinite(r.train_loss));
        REQUIRE(r.family_ce.size() == 3);
        for (const auto& [fam, ce] : r.family_ce) {
            (void)fam;
            CHECK(std::isfinite(ce));
        }
    }

    const std::string table = sweep_table(rows, reg.families());
    std::stringstream ss(table);
    std::string header;
    std::getline(ss, header);
    CHECK(header == "strategy\tn_last\ttrain_loss\tce_famA\tce_famB\tce_famC");
    int data_rows = 0;
    std::string line;
    while (std::getline(ss, line)) ++data_rows;
    CHECK(data_rows == 12);

    SweepConfig bad = sc;
    bad.base_model.layer_kind[1] = LayerKind::MoE;
    MoEConfig mc;
    mc.n_experts = 2;
    mc.k = 1;
    bad.base_model.moe = mc;
    CHECK_THROWS_AS(run_sweep(train_docs, eval_docs, reg, bad), ConfigError);
    bad = sc;
    bad.depths = {0, 3};
    CHECK_THROWS_AS(run_sweep(train_docs, eval_docs, reg, bad), ConfigError);
}
