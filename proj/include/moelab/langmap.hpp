#pragma once

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "moelab/error.hpp"
#include "moelab/moe.hpp"

namespace moelab {

struct LanguageEntry {
    std::string code;
    std::string name;
    std::string family;
};

// The 50 languages and 7 families, plus the language->expert maps. Family
// order follows the built-in table top to bottom; per-language expert order
// is alphabetical over the eligible codes. Immutable once constructed.
class LanguageRegistry {
public:
    LanguageRegistry(std::vector<LanguageEntry> entries,
                     std::vector<std::string> per_language_codes)
        : entries_(std::move(entries)) {
        if (entries_.empty())
            throw RegistryError("registry: no languages");
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            const LanguageEntry& e = entries_[i];
            if (e.code.empty() || e.family.empty())
                throw RegistryError("registry: entry " + std::to_string(i) +
                                    " has an empty code or family");
            if (!index_.emplace(e.code, i).second)
                throw RegistryError("registry: duplicate code " + e.code);
            if (family_index_.emplace(e.family, families_.size()).second)
                families_.push_back(e.family);
        }
        for (const std::string& c : per_language_codes) {
            if (!index_.count(c))
                throw RegistryError("registry: per-language code " + c +
                                    " is not registered");
        }
        per_language_ = std::move(per_language_codes);
        std::sort(per_language_.begin(), per_language_.end());
        for (std::size_t i = 0; i < per_language_.size(); ++i)
            per_language_index_.emplace(per_language_[i], i);
    }

    // Table-4 languages; the 12 high-resource codes carry per-language experts.
    static const LanguageRegistry& builtin();

    // Override file: one language per row, "code<TAB>name<TAB>family".
    // Blank lines and lines starting with '#' are skipped. Every code is
    // per-language-eligible in an override registry.
    static LanguageRegistry from_tsv(std::istream& in) {
        std::vector<LanguageEntry> rows;
        std::vector<std::string> codes;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty() || line[0] == '#') continue;
            std::vector<std::string> fields;
            std::size_t start = 0;
            while (true) {
                std::size_t tab = line.find('\t', start);
                fields.push_back(line.substr(
                    start, tab == std::string::npos ? tab : tab - start));
                if (tab == std::string::npos) break;
                start = tab + 1;
            }
            if (fields.size() != 3 || fields[0].empty() || fields[2].empty())
                throw FormatError("registry line " + std::to_string(lineno) +
                                  ": want code<TAB>name<TAB>family, got '" +
                                  line + "'");
            rows.push_back({fields[0], fields[1], fields[2]});
            codes.push_back(fields[0]);
        }
        return LanguageRegistry(std::move(rows), std::move(codes));
    }

    static LanguageRegistry from_tsv_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open registry file: " + path);
        return from_tsv(in);
    }

    const std::vector<LanguageEntry>& entries() const { return entries_; }
    const std::vector<std::string>& families() const { return families_; }
    const std::vector<std::string>& per_language_codes() const {
        return per_language_;
    }

    bool has(const std::string& code) const { return index_.count(code) > 0; }

    const LanguageEntry& entry(const std::string& code) const {
        auto it = index_.find(code);
        if (it == index_.end())
            throw RegistryError("unknown language code " + code);
        return entries_[it->second];
    }

    const std::string& family_of(const std::string& code) const {
        return entry(code).family;
    }

    std::vector<std::string> members(const std::string& family) const {
        if (!family_index_.count(family))
            throw RegistryError("unknown family " + family);
        std::vector<std::string> out;
        for (const LanguageEntry& e : entries_)
            if (e.family == family) out.push_back(e.code);
        return out;
    }

    // Whether expert_of is defined for this code under the scheme.
    bool covered(const std::string& code, ExpertScheme scheme) const {
        entry(code);
        return scheme == ExpertScheme::PerFamily ||
               per_language_index_.count(code) > 0;
    }

    int expert_of(const std::string& code, ExpertScheme scheme) const {
        const LanguageEntry& e = entry(code);
        if (scheme == ExpertScheme::PerFamily)
            return static_cast<int>(family_index_.at(e.family));
        auto it = per_language_index_.find(code);
        if (it == per_language_index_.end())
            throw SchemeError("per-language experts do not cover " + code);
        return static_cast<int>(it->second);
    }

    int n_experts(ExpertScheme scheme) const {
        return static_cast<int>(scheme == ExpertScheme::PerFamily
                                    ? families_.size()
                                    : per_language_.size());
    }

    // Uniform per-document tagging: every token inherits the document's
    // language.
    std::vector<std::string> tag_tokens(std::span<const int> doc,
                                        const std::string& doc_lang) const {
        entry(doc_lang);
        return std::vector<std::string>(doc.size(), doc_lang);
    }

    // Same tagging mapped through expert_of; -1 marks codes the scheme does
    // not cover (routing strategies that need the tag reject those later).
    std::vector<int> expert_tags(std::span<const int> doc,
                                 const std::string& doc_lang,
                                 ExpertScheme scheme) const {
        const int id =
            covered(doc_lang, scheme) ? expert_of(doc_lang, scheme) : -1;
        return std::vector<int>(doc.size(), id);
    }

private:
    std::vector<LanguageEntry> entries_;
    std::vector<std::string> families_;
    std::vector<std::string> per_language_;
    std::map<std::string, std::size_t> index_;
    std::map<std::string, std::size_t> family_index_;
    std::map<std::string, std::size_t> per_language_index_;
};

inline const LanguageRegistry& LanguageRegistry::builtin() {
    // The published table is reproduced as-is, quirks included: "Ne" is
    // listed as Mongolian, and Dogue (Doi) sits under Austronesian.
    static const LanguageRegistry reg(
        {
            {"Zh", "Chinese", "Sino-Tibetan"},
            {"Ko", "Korean", "Altaic"},
            {"Ja", "Japanese", "Altaic"},
            {"Ne", "Mongolian", "Altaic"},
            {"Th", "Thai", "Australasian"},
            {"Vi", "Vietnamese", "Australasian"},
            {"Lo", "Laotian", "Australasian"},
            {"Mg", "Malagasy", "Austronesian"},
            {"Ceb", "Cebuano", "Austronesian"},
            {"Su", "Sundanese", "Austronesian"},
            {"Ilo", "Ilokano", "Austronesian"},
            {"Doi", "Dogue", "Austronesian"},
            {"En", "English", "Indo-European"},
            {"De", "German", "Indo-European"},
            {"Pt", "Portuguese", "Indo-European"},
            {"Es", "Spanish", "Indo-European"},
            {"Fr", "French", "Indo-European"},
            {"Ru", "Russian", "Indo-European"},
            {"It", "Italian", "Indo-European"},
            {"Hr", "Croatian", "Indo-European"},
            {"Gl", "Galician", "Indo-European"},
            {"Cs", "Czech", "Indo-European"},
            {"Co", "Corsican", "Indo-European"},
            {"La", "Latin", "Indo-European"},
            {"Uk", "Ukrainian", "Indo-European"},
            {"Bs", "Bosnian", "Indo-European"},
            {"Bg", "Bulgarian", "Indo-European"},
            {"Eo", "Esperanto", "Indo-European"},
            {"Mai", "Maithili", "Indo-European"},
            {"Sq", "Albanian", "Indo-European"},
            {"Da", "Danish", "Indo-European"},
            {"Sa", "Sanskrit", "Indo-European"},
            {"No", "Norwegian", "Indo-European"},
            {"Gn", "Guarani", "Indo-European"},
            {"Sr", "Serbian", "Indo-European"},
            {"Sk", "Slovak", "Indo-European"},
            {"Gd", "Scottish Gaelic", "Indo-European"},
            {"Lb", "Luxembourgish", "Indo-European"},
            {"Hi", "Hindi", "Indo-European"},
            {"Ar", "Arabic", "Afro-Asian"},
            {"Ckb", "Kurdish (Sorani)", "Afro-Asian"},
            {"Mt", "Maltese", "Afro-Asian"},
            {"He", "Hebrew", "Afro-Asian"},
            {"Ln", "Lingala", "Kongolese"},
            {"Bm", "Bambara", "Kongolese"},
            {"Sw", "Swahili", "Kongolese"},
            {"Nso", "Sepeti", "Kongolese"},
            {"Ig", "Igbo", "Kongolese"},
            {"Rw", "Kinyarwanda", "Kongolese"},
            {"Ha", "Hausa", "Kongolese"},
        },
        {"Ar", "De", "En", "Es", "Fr", "Hi", "It", "Ja", "Ko", "Pt", "Ru",
         "Zh"});
    return reg;
}

}  // namespace moelab
