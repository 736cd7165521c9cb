#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "moelab/circuits.hpp"
#include "moelab/corpus.hpp"
#include "oracles.hpp"

using namespace moelab;

namespace {

// Synthetic trace with k distinct random experts per token per layer.
RoutingTrace make_trace(int n_tokens, const std::vector<int>& layers, int e,
                        int k, const std::vector<std::string>& langs,
                        std::uint64_t seed) {
    Rng rng(seed);
    RoutingTrace t;
    t.n_experts = e;
    t.k = k;
    for (int i = 0; i < n_tokens; ++i) {
        TraceRecord r;
        r.doc_id = i / 50;
        r.pos = i % 50;
        r.token_id = static_cast<int>(rng.next_below(100));
        r.lang = langs[i % langs.size()];
        for (int l : layers) {
            std::vector<double> probs(e);
            double z = 0.0;
            for (double& p : probs) {
                p = 0.05 + rng.next_double();
                z += p;
            }
            for (double& p : probs) p /= z;
            ExpertSelection sel = select_topk(probs, k);
            r.layers.push_back({l, sel.expert_ids, sel.gates});
        }
        t.records.push_back(std::move(r));
    }
    return t;
}

std::vector<oracle::TraceRow> to_rows(const RoutingTrace& t,
                                      const std::string& lang = "") {
    std::vector<oracle::TraceRow> rows;
    for (const TraceRecord& r : t.records) {
        if (!lang.empty() && r.lang != lang) continue;
        oracle::TraceRow row;
        for (const TraceLayerEntry& le : r.layers) row[le.layer] = le.experts;
        rows.push_back(std::move(row));
    }
    return rows;
}

ModelConfig traced_model_config() {
    ModelConfig c;
    c.vocab_size = 11;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_layers = 4;
    c.d_ffn = 12;
    c.max_seq_len = 16;
    c.layer_kind = {LayerKind::Dense, LayerKind::Dense, LayerKind::MoE,
                    LayerKind::MoE};
    MoEConfig moe;
    moe.n_experts = 6;  // one per desk6 language
    moe.k = 2;
    moe.strategy = Routing::HybridK;
    moe.expert_scheme = ExpertScheme::PerLanguage;
    c.moe = moe;
    return c;
}

}  // namespace

TEST_CASE("record_trace yields one record per token, one entry per MoE layer") {
    auto m = build_model<double>(traced_model_config(), 101);
    LanguageRegistry reg = desk6_registry();
    std::vector<TraceDoc> docs = {
        {"syn0", {1, 2, 3, 4, 5, 6, 7, 8, 9, 10}},
        {"syn2", {5, 4, 3, 2, 1}},
        {"syn4", {0, 1, 0, 1, 0, 1, 0}},
    };
    RoutingTrace t = record_trace(m, docs, reg);
    CHECK(t.records.size() == 22);  // 10 + 5 + 7
    CHECK(t.n_experts == 6);
    CHECK(t.k == 2);
    std::size_t idx = 0;
    for (std::size_t d = 0; d < docs.size(); ++d)
        for (std::size_t p = 0; p < docs[d].tokens.size(); ++p, ++idx) {
            const TraceRecord& r = t.records[idx];
            CHECK(r.doc_id == static_cast<int>(d));
            CHECK(r.pos == static_cast<int>(p));
            CHECK(r.token_id == docs[d].tokens[p]);
            CHECK(r.lang == docs[d].lang);
            REQUIRE(r.layers.size() == 2);
            CHECK(r.layers[0].layer == 2);
            CHECK(r.layers[1].layer == 3);
            for (const TraceLayerEntry& le : r.layers) {
                CHECK(le.experts.size() == 2);
                CHECK(std::is_sorted(le.experts.begin(), le.experts.end()));
                double s = 0.0;
                for (double g : le.gates) s += g;
                CHECK(std::abs(s - 1.0) < 1e-9);
                // HybridK per-language: the doc's expert is always present.
                const int want =
                    reg.expert_of(docs[d].lang, ExpertScheme::PerLanguage);
                CHECK(std::count(le.experts.begin(), le.experts.end(), want) ==
                      1);
            }
        }
}

TEST_CASE("tracing is pure observation") {
    auto m = build_model<double>(traced_model_config(), 103);
    LanguageRegistry reg = desk6_registry();
    std::vector<int> ids{1, 2, 3, 4};
    auto tags = reg.expert_tags(ids, "syn1", ExpertScheme::PerLanguage);

    auto logits = [&]() {
        Tape<double> tape;
        Tensor<double> out = model_forward(tape, m, std::span<const int>(ids),
                                           std::span<const int>(tags));
        return std::vector<double>(out.values().data(),
                                   out.values().data() + out.size());
    };
    auto before = logits();
    record_trace(m, {{"syn1", ids}}, reg);
    CHECK(before == logits());
}

TEST_CASE("record_trace requires an MoE layer") {
    ModelConfig c = traced_model_config();
    c.layer_kind.assign(4, LayerKind::Dense);
    c.moe.reset();
    auto m = build_model<double>(c, 107);
    CHECK_THROWS_AS(record_trace(m, {{"syn0", {1, 2}}}, desk6_registry()),
                    TraceError);
}

TEST_CASE("layer_distribution equals the recount oracle") {
    RoutingTrace t =
        make_trace(1000, {2, 3, 5}, 6, 2, {"syn0", "syn1"}, 211);
    LayerDistribution d = layer_distribution(t);
    CHECK(d.layers == std::vector<int>{2, 3, 5});
    CHECK(d.n_tokens == 1000);

    auto want = oracle::membership_ratios(to_rows(t));
    for (std::size_t li = 0; li < d.layers.size(); ++li)
        for (int e = 0; e < 6; ++e) {
            auto it = want.find({d.layers[li], e});
            const double w = it == want.end() ? 0.0 : it->second;
            CHECK(d.ratio[li][e] == w);  // same counts, same division
        }

    // Every row sums to k.
    for (const auto& row : d.ratio) {
        double s = 0.0;
        for (double v : row) s += v;
        CHECK(std::abs(s - 2.0) < 1e-9);
    }
}

TEST_CASE("layer_distribution language filter") {
    RoutingTrace t = make_trace(200, {0}, 4, 2, {"syn0", "syn1"}, 223);
    LayerDistribution all = layer_distribution(t);
    LayerDistribution a = layer_distribution(t, std::string("syn0"));
    LayerDistribution b = layer_distribution(t, std::string("syn1"));
    CHECK(a.n_tokens == 100);
    CHECK(b.n_tokens == 100);
    CHECK(all.n_tokens == 200);

    auto want_a = oracle::membership_ratios(to_rows(t, "syn0"));
    for (int e = 0; e < 4; ++e) {
        auto it = want_a.find({0, e});
        CHECK(a.ratio[0][e] == (it == want_a.end() ? 0.0 : it->second));
    }
    // Aggregate is the token-weighted mean of the per-language rows.
    for (int e = 0; e < 4; ++e)
        CHECK(all.ratio[0][e] ==
              doctest::Approx(0.5 * a.ratio[0][e] + 0.5 * b.ratio[0][e])
                  .epsilon(1e-12));

    CHECK_THROWS_AS(layer_distribution(t, std::string("nope")), TraceError);
    RoutingTrace empty;
    empty.n_experts = 4;
    CHECK_THROWS_AS(layer_distribution(empty), TraceError);
}

TEST_CASE("constant routing gives an all-ones row and a unit chain") {
    RoutingTrace t;
    t.n_experts = 5;
    t.k = 2;
    for (int i = 0; i < 40; ++i) {
        TraceRecord r;
        r.doc_id = 0;
        r.pos = i;
        r.token_id = 0;
        r.lang = "syn0";
        r.layers.push_back({0, {0, 1}, {0.6, 0.4}});
        r.layers.push_back({1, {0, 1}, {0.5, 0.5}});
        r.layers.push_back({2, {0, 1}, {0.7, 0.3}});
        t.records.push_back(std::move(r));
    }
    LayerDistribution d = layer_distribution(t);
    CHECK(d.ratio[0] == std::vector<double>{1.0, 1.0, 0.0, 0.0, 0.0});

    Circuit c = build_circuit(d, t, 0.5);
    REQUIRE(c.nodes.size() == 6);  // experts 0 and 1 at three layers
    for (const CircuitNode& n : c.nodes) CHECK(n.ratio == 1.0);
    REQUIRE(c.edges.size() == 8);  // 2x2 pairs between consecutive layers
    for (const CircuitEdge& e : c.edges) {
        CHECK(e.weight == 1.0);
        CHECK(e.to_layer == e.from_layer + 1);
    }

    // Above the maximum ratio nothing survives.
    Circuit none = build_circuit(d, t, 1.01);
    CHECK(none.nodes.empty());
    CHECK(none.edges.empty());
}

TEST_CASE("build_circuit matches the brute-force oracle") {
    RoutingTrace t = make_trace(500, {1, 2}, 5, 2, {"syn0"}, 227);
    LayerDistribution d = layer_distribution(t);
    auto ratios = oracle::membership_ratios(to_rows(t));
    auto edges = oracle::comembership_edges(to_rows(t));

    for (double th : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        Circuit c = build_circuit(d, t, th);
        std::set<std::pair<int, int>> retained;
        std::map<std::pair<int, int>, double> want_nodes;
        for (const auto& [key, ratio] : ratios)
            if (ratio >= th) {
                want_nodes[key] = ratio;
                retained.insert(key);
            }
        // threshold 0 also retains never-selected experts (ratio 0.0)
        if (th == 0.0)
            for (int l : {1, 2})
                for (int e = 0; e < 5; ++e)
                    if (!want_nodes.count({l, e})) {
                        want_nodes[{l, e}] = 0.0;
                        retained.insert({l, e});
                    }
        REQUIRE(c.nodes.size() == want_nodes.size());
        for (const CircuitNode& n : c.nodes) {
            auto it = want_nodes.find({n.layer, n.expert});
            REQUIRE(it != want_nodes.end());
            CHECK(n.ratio == it->second);
        }
        std::map<std::pair<std::pair<int, int>, std::pair<int, int>>, double>
            want_edges;
        for (const auto& [key, w] : edges)
            if (retained.count(key.first) && retained.count(key.second))
                want_edges[key] = w;
        REQUIRE(c.edges.size() == want_edges.size());
        for (const CircuitEdge& e : c.edges) {
            auto it = want_edges.find(
                {{e.from_layer, e.from_expert}, {e.to_layer, e.to_expert}});
            REQUIRE(it != want_edges.end());
            CHECK(e.weight == it->second);
        }
    }
}

TEST_CASE("thresholds are monotone and edges bounded by endpoint ratios") {
    RoutingTrace t = make_trace(600, {0, 1, 2}, 6, 3, {"a", "b", "c"}, 229);
    LayerDistribution d = layer_distribution(t);
    std::vector<double> thresholds{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
    std::set<std::pair<int, int>> prev;
    bool first = true;
    for (double th : thresholds) {
        Circuit c = build_circuit(d, t, th);
        std::set<std::pair<int, int>> cur;
        std::map<std::pair<int, int>, double> ratio_of;
        for (const CircuitNode& n : c.nodes) {
            cur.insert({n.layer, n.expert});
            ratio_of[{n.layer, n.expert}] = n.ratio;
        }
        if (!first)  // raising the threshold never adds nodes
            for (const auto& key : cur) CHECK(prev.count(key) == 1);
        prev = cur;
        first = false;
        for (const CircuitEdge& e : c.edges) {
            CHECK(e.weight <=
                  ratio_of.at({e.from_layer, e.from_expert}) + 1e-12);
            CHECK(e.weight <= ratio_of.at({e.to_layer, e.to_expert}) + 1e-12);
            CHECK(e.weight > 0.0);
        }
    }
    CHECK_THROWS_AS(build_circuit(d, t, -0.1), TraceError);
}

TEST_CASE("divergence profile: zeros, maximum, and permutation invariance") {
    // Identical routing in both languages: profile is exactly zero.
    RoutingTrace a = make_trace(100, {0, 1}, 4, 2, {"x"}, 233);
    RoutingTrace b = a;
    for (TraceRecord& r : b.records) r.lang = "y";
    std::map<std::string, RoutingTrace> same{{"x", a}, {"y", b}};
    for (double v : divergence_profile(same)) CHECK(v == 0.0);

    // Disjoint expert pairs at layer 1: JSD hits ln 2 there.
    RoutingTrace p, q;
    p.n_experts = q.n_experts = 4;
    p.k = q.k = 2;
    for (int i = 0; i < 30; ++i) {
        TraceRecord rp;
        rp.pos = i;
        rp.lang = "x";
        rp.layers.push_back({0, {0, 1}, {0.5, 0.5}});
        rp.layers.push_back({1, {0, 1}, {0.5, 0.5}});
        p.records.push_back(rp);
        TraceRecord rq;
        rq.pos = i;
        rq.lang = "y";
        rq.layers.push_back({0, {0, 1}, {0.5, 0.5}});
        rq.layers.push_back({1, {2, 3}, {0.5, 0.5}});
        q.records.push_back(rq);
    }
    auto prof = divergence_profile({{"x", p}, {"y", q}});
    REQUIRE(prof.size() == 2);
    CHECK(prof[0] == 0.0);
    CHECK(prof[1] == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // Mean pairwise JSD over three languages, against the plain oracle.
    RoutingTrace c = make_trace(100, {0, 1}, 4, 2, {"z"}, 239);
    std::map<std::string, RoutingTrace> three{{"x", a}, {"y", b}, {"z", c}};
    auto profile = divergence_profile(three);
    auto row_of = [&](const RoutingTrace& t, int layer_pos) {
        LayerDistribution d = layer_distribution(t);
        std::vector<double> r = d.ratio[layer_pos];
        double s = 0.0;
        for (double v : r) s += v;
        for (double& v : r) v /= s;
        return r;
    };
    for (int l = 0; l < 2; ++l) {
        const double want = (oracle::jsd(row_of(a, l), row_of(b, l)) +
                             oracle::jsd(row_of(a, l), row_of(c, l)) +
                             oracle::jsd(row_of(b, l), row_of(c, l))) /
                            3.0;
        CHECK(profile[l] == doctest::Approx(want).epsilon(1e-12));
        CHECK(profile[l] >= 0.0);
        CHECK(profile[l] <= std::log(2.0) + 1e-12);
    }

    std::map<std::string, RoutingTrace> single{{"x", a}};
    CHECK_THROWS_AS(divergence_profile(single), TraceError);

    RoutingTrace other_layers = make_trace(50, {0, 2}, 4, 2, {"w"}, 241);
    std::map<std::string, RoutingTrace> mismatched{{"x", a},
                                                   {"w", other_layers}};
    CHECK_THROWS_AS(divergence_profile(mismatched), TraceError);
}

TEST_CASE("dot export: ranks per layer, labels, and chain edge count") {
    RoutingTrace t;
    t.n_experts = 3;
    t.k = 1;
    for (int i = 0; i < 10; ++i) {
        TraceRecord r;
        r.pos = i;
        r.lang = "x";
        for (int l = 0; l < 4; ++l) r.layers.push_back({l, {0}, {1.0}});
        t.records.push_back(std::move(r));
    }
    Circuit c = build_circuit(layer_distribution(t), t, 0.5);
    std::string dot = circuit_to_dot(c);
    CHECK(dot.find("digraph circuit {") == 0);
    CHECK(dot.find("\"L0:E0\" [label=\"L0:E0 (1.000000)\"]") !=
          std::string::npos);
    std::size_t arrows = 0, ranks = 0, pos = 0;
    while ((pos = dot.find("->", pos)) != std::string::npos) {
        ++arrows;
        pos += 2;
    }
    pos = 0;
    while ((pos = dot.find("rank=same", pos)) != std::string::npos) {
        ++ranks;
        pos += 9;
    }
    CHECK(arrows == 3);  // single chain over 4 layers
    CHECK(ranks == 4);
    CHECK(dot.find("penwidth=4.000000") != std::string::npos);

    Circuit empty;
    std::string ed = circuit_to_dot(empty);
    CHECK(ed.find("digraph circuit {") == 0);
    CHECK(ed.find("->") == std::string::npos);
}

TEST_CASE("json export is sorted, 6-decimal, and round-trips") {
    RoutingTrace t = make_trace(500, {1, 2}, 4, 2, {"x"}, 251);
    Circuit c = build_circuit(layer_distribution(t), t, 0.25);
    REQUIRE(!c.nodes.empty());
    REQUIRE(!c.edges.empty());

    const std::string path = "circuit_roundtrip.json";
    export_circuit(c, CircuitFormat::Json, path);
    Circuit back = load_circuit_json(path);
    CHECK(back == c);  // ratios are multiples of 1/500, exact at 6 decimals

    // Re-export reproduces the file byte for byte.
    std::ifstream in(path);
    std::stringstream buf;
    buf << in.rdbuf();
    CHECK(circuit_to_json(back) == buf.str());
    CHECK(buf.str().find("\"edges\":[{\"from\":[") != std::string::npos);

    Circuit empty;
    empty.threshold = 0.5;
    std::string ej = circuit_to_json(empty);
    CHECK(ej ==
          "{\"edges\":[],\"nodes\":[],\"threshold\":0.500000}\n");
    CHECK(circuit_from_json(ej) == empty);

    CHECK_THROWS_AS(export_circuit(c, CircuitFormat::Json, "no_dir/x.json"),
                    IoError);
    CHECK_THROWS_AS(circuit_from_json("{not json"), FormatError);
    std::remove(path.c_str());
}

TEST_CASE("trace files round-trip and keep stable bytes") {
    auto m = build_model<double>(traced_model_config(), 109);
    LanguageRegistry reg = desk6_registry();
    // syn5's forced expert pins the max id, so n_experts can be re-inferred.
    std::vector<TraceDoc> docs = {{"syn0", {1, 2, 3}}, {"syn5", {4, 5}}};
    RoutingTrace t = record_trace(m, docs, reg);

    const std::string path = "trace_roundtrip.jsonl";
    write_trace(t, path);
    RoutingTrace back = read_trace(path);
    REQUIRE(back.records.size() == t.records.size());
    CHECK(back.n_experts == 6);
    CHECK(back.k == 2);
    for (std::size_t i = 0; i < t.records.size(); ++i) {
        const TraceRecord& a = t.records[i];
        const TraceRecord& b = back.records[i];
        CHECK(a.doc_id == b.doc_id);
        CHECK(a.pos == b.pos);
        CHECK(a.token_id == b.token_id);
        CHECK(a.lang == b.lang);
        REQUIRE(a.layers.size() == b.layers.size());
        for (std::size_t l = 0; l < a.layers.size(); ++l) {
            CHECK(a.layers[l].layer == b.layers[l].layer);
            CHECK(a.layers[l].experts == b.layers[l].experts);
            REQUIRE(a.layers[l].gates.size() == b.layers[l].gates.size());
            for (std::size_t g = 0; g < a.layers[l].gates.size(); ++g)
                CHECK(std::abs(a.layers[l].gates[g] - b.layers[l].gates[g]) <
                      5e-7);  // 6-decimal quantization
        }
    }

    // Identical writes, byte for byte.
    const std::string path2 = "trace_roundtrip_2.jsonl";
    write_trace(t, path2);
    auto slurp = [](const std::string& p) {
        std::ifstream in(p, std::ios::binary);
        std::stringstream buf;
        buf << in.rdbuf();
        return buf.str();
    };
    CHECK(slurp(path) == slurp(path2));
    CHECK(slurp(path).substr(0, 22) == "{\"doc_id\":0,\"lang\":\"sy");

    std::ofstream bad(path2, std::ios::trunc);
    bad << "{\"doc_id\":0, nope\n";
    bad.close();
    CHECK_THROWS_AS(read_trace(path2), FormatError);
    CHECK_THROWS_AS(read_trace("missing_trace.jsonl"), IoError);
    std::remove(path.c_str());
    std::remove(path2.c_str());
}
