#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "moelab/langmap.hpp"
#include "moelab/transformer.hpp"

namespace moelab {

struct TraceLayerEntry {
    int layer = 0;
    std::vector<int> experts;
    std::vector<double> gates;
};

struct TraceRecord {
    int doc_id = 0;
    int pos = 0;
    int token_id = 0;
    std::string lang;
    std::vector<TraceLayerEntry> layers;
};

struct RoutingTrace {
    std::vector<TraceRecord> records;
    int n_experts = 0;
    int k = 0;
};

struct TraceDoc {
    std::string lang;
    std::vector<int> tokens;
};

namespace detail {

inline std::string fmt6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace detail

// Runs each document through the model and records, per token, which experts
// fired at every MoE layer. Pure observation: the forward pass is the
// standard one, logits are discarded, nothing is trained.
template <class S>
RoutingTrace record_trace(const Model<S>& m, const std::vector<TraceDoc>& docs,
                          const LanguageRegistry& reg) {
    if (m.cfg.n_moe_layers() == 0)
        throw TraceError("trace: model has no MoE layers");
    RoutingTrace trace;
    trace.n_experts = m.cfg.moe->n_experts;
    trace.k = m.cfg.moe->k;

    for (std::size_t d = 0; d < docs.size(); ++d) {
        const TraceDoc& doc = docs[d];
        if (doc.tokens.empty()) continue;
        const std::vector<int> tags = reg.expert_tags(
            doc.tokens, doc.lang, m.cfg.moe->expert_scheme);

        std::vector<TraceRecord> doc_records(doc.tokens.size());
        for (std::size_t p = 0; p < doc.tokens.size(); ++p) {
            doc_records[p].doc_id = static_cast<int>(d);
            doc_records[p].pos = static_cast<int>(p);
            doc_records[p].token_id = doc.tokens[p];
            doc_records[p].lang = doc.lang;
        }
        MoEHook hook = [&](int layer,
                           const std::vector<ExpertSelection>& sels) {
            for (std::size_t p = 0; p < sels.size(); ++p)
                doc_records[p].layers.push_back(
                    {layer, sels[p].expert_ids, sels[p].gates});
        };
        Tape<S> tape;
        tape.set_recording(false);  // observation only, no backward
        model_forward(tape, m, std::span<const int>(doc.tokens),
                      std::span<const int>(tags), &hook);
        for (TraceRecord& r : doc_records)
            trace.records.push_back(std::move(r));
    }
    return trace;
}

struct LayerDistribution {
    std::vector<int> layers;                 // MoE block indices, ascending
    std::vector<std::vector<double>> ratio;  // [index into layers][expert]
    std::int64_t n_tokens = 0;

    double at(int layer, int expert) const {
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i] == layer) return ratio[i][expert];
        throw TraceError("distribution: no such layer " +
                         std::to_string(layer));
    }
};

// Membership fractions: ratio[l][e] = share of traced tokens whose selection
// at layer l includes expert e. Rows sum to k. Optional filter keeps a single
// language's tokens; none means the aggregate over all records.
inline LayerDistribution layer_distribution(
    const RoutingTrace& trace,
    const std::optional<std::string>& lang = std::nullopt) {
    std::set<int> layer_set;
    std::int64_t n = 0;
    std::map<std::pair<int, int>, std::int64_t> counts;
    for (const TraceRecord& r : trace.records) {
        if (lang && r.lang != *lang) continue;
        ++n;
        for (const TraceLayerEntry& le : r.layers) {
            layer_set.insert(le.layer);
            for (int e : le.experts) ++counts[{le.layer, e}];
        }
    }
    if (n == 0)
        throw TraceError(lang ? "distribution: no records for language " + *lang
                              : "distribution: empty trace");

    LayerDistribution dist;
    dist.n_tokens = n;
    dist.layers.assign(layer_set.begin(), layer_set.end());
    dist.ratio.assign(dist.layers.size(),
                      std::vector<double>(trace.n_experts, 0.0));
    for (const auto& [key, c] : counts) {
        const auto row = std::lower_bound(dist.layers.begin(),
                                          dist.layers.end(), key.first) -
                         dist.layers.begin();
        if (key.second >= trace.n_experts)
            throw TraceError("distribution: expert id " +
                             std::to_string(key.second) + " out of range");
        dist.ratio[row][key.second] =
            static_cast<double>(c) / static_cast<double>(n);
    }
    return dist;
}

struct CircuitNode {
    int layer = 0;
    int expert = 0;
    double ratio = 0.0;

    bool operator==(const CircuitNode&) const = default;
};

struct CircuitEdge {
    int from_layer = 0;
    int from_expert = 0;
    int to_layer = 0;
    int to_expert = 0;
    double weight = 0.0;

    bool operator==(const CircuitEdge&) const = default;
};

struct Circuit {
    double threshold = 0.5;
    std::vector<CircuitNode> nodes;  // ordered by (layer, expert)
    std::vector<CircuitEdge> edges;  // consecutive retained layers only

    bool operator==(const Circuit&) const = default;
};

// Thresholded information-flow circuit: nodes are (layer, expert) pairs with
// membership ratio >= threshold; an edge carries the fraction of tokens whose
// selections include both endpoints at consecutive MoE layers. Zero
// co-membership means no edge. Pass the same language filter that produced
// the distribution.
inline Circuit build_circuit(
    const LayerDistribution& dist, const RoutingTrace& trace,
    double threshold = 0.5,
    const std::optional<std::string>& lang = std::nullopt) {
    if (threshold < 0.0)
        throw TraceError("circuit: threshold must be >= 0");

    Circuit c;
    c.threshold = threshold;
    std::set<std::pair<int, int>> retained;
    for (std::size_t i = 0; i < dist.layers.size(); ++i)
        for (int e = 0; e < static_cast<int>(dist.ratio[i].size()); ++e)
            if (dist.ratio[i][e] >= threshold) {
                c.nodes.push_back({dist.layers[i], e, dist.ratio[i][e]});
                retained.insert({dist.layers[i], e});
            }

    std::map<std::tuple<int, int, int, int>, std::int64_t> co;
    std::int64_t n = 0;
    for (const TraceRecord& r : trace.records) {
        if (lang && r.lang != *lang) continue;
        ++n;
        for (std::size_t i = 0; i + 1 < r.layers.size(); ++i) {
            const TraceLayerEntry& a = r.layers[i];
            const TraceLayerEntry& b = r.layers[i + 1];
            for (int ea : a.experts) {
                if (!retained.count({a.layer, ea})) continue;
                for (int eb : b.experts) {
                    if (!retained.count({b.layer, eb})) continue;
                    ++co[{a.layer, ea, b.layer, eb}];
                }
            }
        }
    }
    for (const auto& [key, cnt] : co)
        c.edges.push_back({std::get<0>(key), std::get<1>(key),
                           std::get<2>(key), std::get<3>(key),
                           static_cast<double>(cnt) / static_cast<double>(n)});
    return c;
}

// Base-e Jensen-Shannon divergence between two distributions over the same
// support; symmetric and bounded by ln 2.
inline double jensen_shannon(std::span<const double> p,
                             std::span<const double> q) {
    double d = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0.0) d += 0.5 * p[i] * std::log(p[i] / m);
        if (q[i] > 0.0) d += 0.5 * q[i] * std::log(q[i] / m);
    }
    return d;
}

// Per-layer mean pairwise JSD between the languages' expert membership
// distributions (rows normalized to sum 1). High late-layer values are the
// "spread out in the end" signature.
inline std::vector<double> divergence_profile(
    const std::map<std::string, RoutingTrace>& by_lang) {
    if (by_lang.size() < 2)
        throw TraceError("divergence: need at least two languages");

    std::vector<std::vector<std::vector<double>>> rows;  // [lang][layer][e]
    std::vector<int> layers;
    for (const auto& [lang, trace] : by_lang) {
        LayerDistribution d = layer_distribution(trace);
        if (rows.empty()) {
            layers = d.layers;
        } else if (d.layers != layers) {
            throw TraceError("divergence: traces disagree on MoE layers");
        }
        std::vector<std::vector<double>> norm;
        for (const auto& row : d.ratio) {
            double s = 0.0;
            for (double v : row) s += v;
            std::vector<double> r(row);
            for (double& v : r) v /= s;
            norm.push_back(std::move(r));
        }
        rows.push_back(std::move(norm));
    }

    std::vector<double> profile(layers.size(), 0.0);
    const std::size_t l_count = rows.size();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        double sum = 0.0;
        int pairs = 0;
        for (std::size_t a = 0; a < l_count; ++a)
            for (std::size_t b = a + 1; b < l_count; ++b) {
                sum += jensen_shannon(rows[a][l], rows[b][l]);
                ++pairs;
            }
        profile[l] = sum / pairs;
    }
    return profile;
}

// DOT rendering: one rank block per layer, labels "L{l}:E{e} ({ratio})",
// edge penwidth proportional to weight.
inline std::string circuit_to_dot(const Circuit& c) {
    std::ostringstream out;
    out << "digraph circuit {\n  rankdir=LR;\n  node [shape=box];\n";
    std::map<int, std::vector<const CircuitNode*>> per_layer;
    for (const CircuitNode& n : c.nodes) per_layer[n.layer].push_back(&n);
    for (const auto& [layer, nodes] : per_layer) {
        out << "  { rank=same;";
        for (const CircuitNode* n : nodes) {
            const std::string id =
                "L" + std::to_string(n->layer) + ":E" + std::to_string(n->expert);
            out << " \"" << id << "\" [label=\"" << id << " ("
                << detail::fmt6(n->ratio) << ")\"];";
        }
        out << " }\n";
    }
    for (const CircuitEdge& e : c.edges)
        out << "  \"L" << e.from_layer << ":E" << e.from_expert << "\" -> \"L"
            << e.to_layer << ":E" << e.to_expert << "\" [penwidth="
            << detail::fmt6(4.0 * e.weight) << "];\n";
    out << "}\n";
    return out.str();
}

// JSON schema: {"edges": [{"from": [l,e], "to": [l,e], "weight": w}],
// "nodes": [{"expert": e, "layer": l, "ratio": r}], "threshold": t} with keys
// sorted and floats at 6 decimals.
inline std::string circuit_to_json(const Circuit& c) {
    std::ostringstream out;
    out << "{\"edges\":[";
    for (std::size_t i = 0; i < c.edges.size(); ++i) {
        const CircuitEdge& e = c.edges[i];
        out << (i ? "," : "") << "{\"from\":[" << e.from_layer << ","
            << e.from_expert << "],\"to\":[" << e.to_layer << ","
            << e.to_expert << "],\"weight\":" << detail::fmt6(e.weight) << "}";
    }
    out << "],\"nodes\":[";
    for (std::size_t i = 0; i < c.nodes.size(); ++i) {
        const CircuitNode& n = c.nodes[i];
        out << (i ? "," : "") << "{\"expert\":" << n.expert
            << ",\"layer\":" << n.layer << ",\"ratio\":" << detail::fmt6(n.ratio)
            << "}";
    }
    out << "],\"threshold\":" << detail::fmt6(c.threshold) << "}\n";
    return out.str();
}

enum class CircuitFormat { Dot, Json };

inline void export_circuit(const Circuit& c, CircuitFormat format,
                           const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << (format == CircuitFormat::Dot ? circuit_to_dot(c)
                                         : circuit_to_json(c));
    if (!out) throw IoError("write failed: " + path);
}

inline Circuit circuit_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("circuit json: ") + e.what());
    }
    try {
        Circuit c;
        c.threshold = j.at("threshold").get<double>();
        for (const auto& n : j.at("nodes"))
            c.nodes.push_back({n.at("layer").get<int>(),
                               n.at("expert").get<int>(),
                               n.at("ratio").get<double>()});
        for (const auto& e : j.at("edges"))
            c.edges.push_back({e.at("from")[0].get<int>(),
                               e.at("from")[1].get<int>(),
                               e.at("to")[0].get<int>(),
                               e.at("to")[1].get<int>(),
                               e.at("weight").get<double>()});
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("circuit json: ") + e.what());
    }
}

inline Circuit load_circuit_json(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return circuit_from_json(buf.str());
}

// Trace file: one record per line, ordered by (doc_id, pos), floats at 6
// decimals. Stable bytes for fixed inputs.
inline void write_trace(const RoutingTrace& trace, const std::string& path) {
    std::vector<const TraceRecord*> order;
    order.reserve(trace.records.size());
    for (const TraceRecord& r : trace.records) order.push_back(&r);
    std::stable_sort(order.begin(), order.end(),
                     [](const TraceRecord* a, const TraceRecord* b) {
                         return std::make_pair(a->doc_id, a->pos) <
                                std::make_pair(b->doc_id, b->pos);
                     });
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    for (const TraceRecord* r : order) {
        out << "{\"doc_id\":" << r->doc_id << ",\"lang\":\"" << r->lang
            << "\",\"layers\":[";
        for (std::size_t i = 0; i < r->layers.size(); ++i) {
            const TraceLayerEntry& le = r->layers[i];
            out << (i ? "," : "") << "{\"experts\":[";
            for (std::size_t e = 0; e < le.experts.size(); ++e)
                out << (e ? "," : "") << le.experts[e];
            out << "],\"gates\":[";
            for (std::size_t g = 0; g < le.gates.size(); ++g)
                out << (g ? "," : "") << detail::fmt6(le.gates[g]);
            out << "],\"layer\":" << le.layer << "}";
        }
        out << "],\"pos\":" << r->pos << ",\"token\":" << r->token_id << "}\n";
    }
    if (!out) throw IoError("write failed: " + path);
}

inline RoutingTrace read_trace(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path);
    RoutingTrace trace;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("trace line " + std::to_string(lineno) + ": " +
                              e.what());
        }
        try {
            TraceRecord r;
            r.doc_id = j.at("doc_id").get<int>();
            r.pos = j.at("pos").get<int>();
            r.token_id = j.at("token").get<int>();
            r.lang = j.at("lang").get<std::string>();
            for (const auto& le : j.at("layers")) {
                TraceLayerEntry entry;
                entry.layer = le.at("layer").get<int>();
                entry.experts = le.at("experts").get<std::vector<int>>();
                entry.gates = le.at("gates").get<std::vector<double>>();
                if (entry.experts.size() != entry.gates.size())
                    throw FormatError("trace line " + std::to_string(lineno) +
                                      ": experts/gates length mismatch");
                if (!std::is_sorted(entry.experts.begin(),
                                    entry.experts.end()))
                    throw FormatError("trace line " + std::to_string(lineno) +
                                      ": expert ids not sorted");
                trace.k = std::max(
                    trace.k, static_cast<int>(entry.experts.size()));
                for (int e : entry.experts)
                    trace.n_experts = std::max(trace.n_experts, e + 1);
                r.layers.push_back(std::move(entry));
            }
            trace.records.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("trace line " + std::to_string(lineno) + ": " +
                              e.what());
        }
    }
    return trace;
}

}  // namespace moelab
