#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "moelab/error.hpp"
#include "moelab/langmap.hpp"
#include "moelab/rng.hpp"

namespace moelab {

// Token id ranges are half-open [lo, hi).
struct TokenRange {
    int lo = 0;
    int hi = 0;

    int size() const { return hi - lo; }
    bool overlaps(const TokenRange& o) const {
        return lo < o.hi && o.lo < hi;
    }
};

// One synthetic language: tokens are drawn from a three-way categorical
// mixture over its private range, its family's shared range, and the global
// anchor range (the cross-lingual common ground).
struct SyntheticLangSpec {
    std::string code;
    std::string family;
    TokenRange private_range;
    TokenRange family_range;
    TokenRange anchor_range;
    double w_private = 0.0;
    double w_family = 0.0;
    double w_anchor = 0.0;
};

inline void validate_specs(const std::vector<SyntheticLangSpec>& specs) {
    if (specs.empty()) throw SpecError("corpus: no language specs");
    for (const SyntheticLangSpec& s : specs) {
        if (s.code.empty() || s.family.empty())
            throw SpecError("corpus: empty code or family");
        if (s.w_private < 0 || s.w_family < 0 || s.w_anchor < 0)
            throw SpecError("corpus: negative mixing weight for " + s.code);
        const double sum = s.w_private + s.w_family + s.w_anchor;
        if (std::abs(sum - 1.0) > 1e-9)
            throw SpecError("corpus: mixing weights for " + s.code +
                            " sum to " + std::to_string(sum) + ", want 1");
        auto need = [&](const TokenRange& r, const char* which, double w) {
            if (w > 0 && r.size() < 1)
                throw SpecError("corpus: " + s.code + " has weight on an empty " +
                                which + " range");
            if (r.lo < 0 || r.hi < r.lo)
                throw SpecError("corpus: " + s.code + " has a malformed " +
                                which + " range");
        };
        need(s.private_range, "private", s.w_private);
        need(s.family_range, "family", s.w_family);
        need(s.anchor_range, "anchor", s.w_anchor);
    }
    for (std::size_t i = 0; i < specs.size(); ++i)
        for (std::size_t j = i + 1; j < specs.size(); ++j) {
            if (specs[i].code == specs[j].code)
                throw SpecError("corpus: duplicate code " + specs[i].code);
            if (specs[i].private_range.overlaps(specs[j].private_range))
                throw SpecError("corpus: private ranges of " + specs[i].code +
                                " and " + specs[j].code + " overlap");
            const bool same_family = specs[i].family == specs[j].family;
            if (same_family &&
                !(specs[i].family_range.lo == specs[j].family_range.lo &&
                  specs[i].family_range.hi == specs[j].family_range.hi))
                throw SpecError("corpus: family ranges within " +
                                specs[i].family + " disagree");
            if (!same_family &&
                specs[i].family_range.overlaps(specs[j].family_range))
                throw SpecError("corpus: family ranges of " + specs[i].family +
                                " and " + specs[j].family + " overlap");
        }
}

struct CorpusDoc {
    std::string lang;
    std::vector<int> tokens;
};

// Deterministic under seed, and independent of generation order: each
// document's stream is keyed by (seed, language index, document index).
inline std::vector<CorpusDoc> gen_corpus(
    const std::vector<SyntheticLangSpec>& specs, int docs_per_lang,
    int doc_len, std::uint64_t seed) {
    validate_specs(specs);
    if (docs_per_lang < 1)
        throw SpecError("corpus: docs_per_lang must be >= 1");
    if (doc_len < 1) throw SpecError("corpus: doc_len must be >= 1");

    std::vector<CorpusDoc> docs;
    docs.reserve(specs.size() * static_cast<std::size_t>(docs_per_lang));
    for (std::size_t li = 0; li < specs.size(); ++li) {
        const SyntheticLangSpec& s = specs[li];
        const std::vector<double> weights{s.w_private, s.w_family, s.w_anchor};
        for (int d = 0; d < docs_per_lang; ++d) {
            Rng rng = Rng(seed).fork(li * 0x100000ull + d);
            CorpusDoc doc;
            doc.lang = s.code;
            doc.tokens.reserve(doc_len);
            for (int t = 0; t < doc_len; ++t) {
                const int cat = rng.next_categorical(weights);
                const TokenRange& r = cat == 0   ? s.private_range
                                      : cat == 1 ? s.family_range
                                                 : s.anchor_range;
                doc.tokens.push_back(
                    r.lo + static_cast<int>(rng.next_below(r.size())));
            }
            docs.push_back(std::move(doc));
        }
    }
    return docs;
}

// Default desk setup: 6 languages in 3 families of 2, vocab 512, weights
// 70% private / 20% family-shared / 10% anchor. Anchors sit at [0, 50),
// family ranges follow, private ranges fill the tail.
inline std::vector<SyntheticLangSpec> desk6_specs() {
    const TokenRange anchors{0, 50};
    std::vector<SyntheticLangSpec> specs;
    const char* families[3] = {"famA", "famB", "famC"};
    for (int l = 0; l < 6; ++l) {
        SyntheticLangSpec s;
        s.code = "syn" + std::to_string(l);
        s.family = families[l / 2];
        s.family_range = {50 + (l / 2) * 34, 50 + (l / 2 + 1) * 34};
        s.private_range = {152 + l * 60, 152 + (l + 1) * 60};
        s.anchor_range = anchors;
        s.w_private = 0.7;
        s.w_family = 0.2;
        s.w_anchor = 0.1;
        specs.push_back(std::move(s));
    }
    return specs;
}

inline LanguageRegistry desk6_registry() {
    std::vector<LanguageEntry> rows;
    std::vector<std::string> codes;
    for (const SyntheticLangSpec& s : desk6_specs()) {
        rows.push_back({s.code, s.code, s.family});
        codes.push_back(s.code);
    }
    return LanguageRegistry(std::move(rows), std::move(codes));
}

// Corpus file: one document per line, {"lang": code, "tokens": [ids]}.
inline void write_corpus(const std::vector<CorpusDoc>& docs,
                         const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    for (const CorpusDoc& d : docs) {
        out << "{\"lang\":\"" << d.lang << "\",\"tokens\":[";
        for (std::size_t i = 0; i < d.tokens.size(); ++i)
            out << (i ? "," : "") << d.tokens[i];
        out << "]}\n";
    }
    if (!out) throw IoError("write failed: " + path);
}

inline std::vector<CorpusDoc> read_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::vector<CorpusDoc> docs;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            docs.push_back({j.at("lang").get<std::string>(),
                            j.at("tokens").get<std::vector<int>>()});
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("corpus line " + std::to_string(lineno) + ": " +
                              e.what());
        }
    }
    return docs;
}

// --- leakage detection ---------------------------------------------------

namespace detail {

// Strict UTF-8 decode to Unicode scalar values; the 64-character rule counts
// scalars, not bytes.
inline std::vector<std::uint32_t> utf8_scalars(const std::string& s) {
    std::vector<std::uint32_t> out;
    out.reserve(s.size());
    std::size_t i = 0;
    const auto bad = [&](const char* why) {
        throw FormatError("invalid utf-8 at byte " + std::to_string(i) + ": " +
                          why);
    };
    while (i < s.size()) {
        const unsigned char b0 = s[i];
        std::uint32_t cp = 0;
        int extra = 0;
        if (b0 < 0x80) {
            cp = b0;
        } else if ((b0 & 0xe0) == 0xc0) {
            cp = b0 & 0x1f;
            extra = 1;
        } else if ((b0 & 0xf0) == 0xe0) {
            cp = b0 & 0x0f;
            extra = 2;
        } else if ((b0 & 0xf8) == 0xf0) {
            cp = b0 & 0x07;
            extra = 3;
        } else {
            bad("bad lead byte");
        }
        if (i + extra >= s.size()) bad("truncated sequence");
        for (int j = 1; j <= extra; ++j) {
            const unsigned char bj = s[i + j];
            if ((bj & 0xc0) != 0x80) bad("bad continuation byte");
            cp = (cp << 6) | (bj & 0x3f);
        }
        static const std::uint32_t min_for[4] = {0, 0x80, 0x800, 0x10000};
        if (extra > 0 && cp < min_for[extra]) bad("overlong encoding");
        if (cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff))
            bad("not a scalar value");
        out.push_back(cp);
        i += extra + 1;
    }
    return out;
}

inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

}  // namespace detail

struct LeakageHit {
    std::size_t train_index = 0;
    std::size_t eval_index = 0;
    std::size_t overlap_len = 0;  // scalars; whole-item hits use item length
    bool whole_item = false;
};

// Flags a train item when it equals an eval item outright or shares >=
// min_len consecutive Unicode scalars with one. Rolling-hash window index
// over the eval side, every hash hit verified by direct comparison, so
// collisions cannot flag. Expected cost is linear in total characters; at
// most one hit is reported per train item.
inline std::vector<LeakageHit> detect_leakage(
    std::span<const std::string> train_items,
    std::span<const std::string> eval_items, std::size_t min_len = 64) {
    if (min_len < 1) throw SpecError("leakage: min_len must be >= 1");

    std::vector<std::vector<std::uint32_t>> eval_sc;
    eval_sc.reserve(eval_items.size());
    std::unordered_map<std::uint64_t, std::vector<std::size_t>> whole;
    for (std::size_t j = 0; j < eval_items.size(); ++j) {
        eval_sc.push_back(detail::utf8_scalars(eval_items[j]));
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (std::uint32_t c : eval_sc.back())
            h = detail::mix64(h ^ c);
        whole[h].push_back(j);
    }

    // Polynomial rolling hash over windows of exactly min_len scalars; a
    // longer shared run always contains such a window.
    const std::uint64_t base = 0x100000001b3ull;
    std::uint64_t top_pow = 1;  // base^(min_len-1)
    for (std::size_t i = 1; i < min_len; ++i) top_pow *= base;

    auto window_hashes = [&](const std::vector<std::uint32_t>& sc,
                             auto&& on_window) {
        if (sc.size() < min_len) return;
        std::uint64_t h = 0;
        for (std::size_t i = 0; i < min_len; ++i)
            h = h * base + detail::mix64(sc[i]);
        on_window(std::size_t{0}, h);
        for (std::size_t i = min_len; i < sc.size(); ++i) {
            h = (h - detail::mix64(sc[i - min_len]) * top_pow) * base +
                detail::mix64(sc[i]);
            on_window(i - min_len + 1, h);
        }
    };

    std::unordered_map<std::uint64_t,
                       std::vector<std::pair<std::size_t, std::size_t>>>
        index;  // hash -> (eval index, window start)
    for (std::size_t j = 0; j < eval_sc.size(); ++j)
        window_hashes(eval_sc[j], [&](std::size_t start, std::uint64_t h) {
            index[h].push_back({j, start});
        });

    std::vector<LeakageHit> hits;
    for (std::size_t i = 0; i < train_items.size(); ++i) {
        const std::vector<std::uint32_t> sc =
            detail::utf8_scalars(train_items[i]);

        bool flagged = false;
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (std::uint32_t c : sc) h = detail::mix64(h ^ c);
        if (auto it = whole.find(h); it != whole.end()) {
            for (std::size_t j : it->second) {
                if (eval_sc[j] == sc) {
                    hits.push_back({i, j, sc.size(), true});
                    flagged = true;
                    break;
                }
            }
        }
        if (flagged) continue;

        window_hashes(sc, [&](std::size_t start, std::uint64_t wh) {
            if (flagged) return;
            auto it = index.find(wh);
            if (it == index.end()) return;
            for (auto [j, estart] : it->second) {
                if (!std::equal(sc.begin() + start,
                                sc.begin() + start + min_len,
                                eval_sc[j].begin() + estart))
                    continue;  // collision, rejected by verification
                // Extend to the maximal run for the report.
                std::size_t lo = 0;
                while (start > lo && estart > lo &&
                       sc[start - lo - 1] == eval_sc[j][estart - lo - 1])
                    ++lo;
                std::size_t hi = min_len;
                while (start + hi < sc.size() &&
                       estart + hi < eval_sc[j].size() &&
                       sc[start + hi] == eval_sc[j][estart + hi])
                    ++hi;
                hits.push_back({i, j, lo + hi, false});
                flagged = true;
                return;
            }
        });
    }
    return hits;
}

inline std::vector<std::size_t> flagged_indices(
    const std::vector<LeakageHit>& hits) {
    std::vector<std::size_t> out;
    out.reserve(hits.size());
    for (const LeakageHit& h : hits) out.push_back(h.train_index);
    return out;
}

// Leakage report: one flagged train item per line.
inline void write_leakage_report(const std::vector<LeakageHit>& hits,
                                 const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    for (const LeakageHit& h : hits)
        out << "{\"eval\":" << h.eval_index << ",\"overlap\":" << h.overlap_len
            << ",\"train\":" << h.train_index << ",\"whole_item\":"
            << (h.whole_item ? "true" : "false") << "}\n";
    if (!out) throw IoError("write failed: " + path);
}

}  // namespace moelab
