#include "ovformer/textbank.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "ovformer/errors.hpp"
#include "ovformer/rng.hpp"
#include "ovformer/serial.hpp"

namespace ovf {

namespace {

std::string normalize_name(const std::string& s) {
    std::string out;
    bool pending_space = false;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!out.empty()) pending_space = true;
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    return out;
}

void l2_normalize(std::vector<double>& v) {
    double n2 = 0.0;
    for (double x : v) n2 += x * x;
    const double n = std::sqrt(n2);
    if (n > 0.0)
        for (double& x : v) x /= n;
}

}  // namespace

const char* split_name(Split s) {
    switch (s) {
        case Split::Super: return "super";
        case Split::Base: return "base";
        default: return "novel";
    }
}

Split parse_split(const std::string& s) {
    if (s == "super") return Split::Super;
    if (s == "base") return Split::Base;
    if (s == "novel") return Split::Novel;
    throw DataError("unknown split tag: '" + s + "'");
}

SplitFilter parse_split_filter(const std::string& s) {
    if (s == "base") return SplitFilter::Base;
    if (s == "novel") return SplitFilter::Novel;
    if (s == "all") return SplitFilter::All;
    throw UsageError("unknown split filter: '" + s + "' (expected base|novel|all)");
}

const VocabClass& Vocabulary::by_id(int id) const {
    if (!has_id(id)) throw DataError("class id " + std::to_string(id) + " not in vocabulary");
    return classes[static_cast<size_t>(id)];
}

bool Vocabulary::has_id(int id) const { return id >= 0 && static_cast<size_t>(id) < classes.size(); }

void Vocabulary::validate() const {
    std::set<std::string> seen;
    for (size_t i = 0; i < classes.size(); ++i) {
        if (classes[i].id != static_cast<int>(i))
            throw DataError("vocabulary ids must be contiguous from 0; found id " + std::to_string(classes[i].id) +
                            " at position " + std::to_string(i));
        const std::string norm = normalize_name(classes[i].name);
        if (norm.empty()) throw DataError("vocabulary class " + std::to_string(i) + " has empty name");
        if (!seen.insert(norm).second)
            throw DataError("duplicate class name after normalization: '" + classes[i].name + "'");
    }
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary: " + path);
    Vocabulary v;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string id_s, split_s, name;
        if (!std::getline(ls, id_s, '\t') || !std::getline(ls, split_s, '\t') || !std::getline(ls, name))
            throw FormatError(path + ":" + std::to_string(line_no) + ": expected <id>\\t<split>\\t<name>");
        VocabClass c;
        try {
            c.id = std::stoi(id_s);
        } catch (const std::exception&) {
            throw FormatError(path + ":" + std::to_string(line_no) + ": bad class id '" + id_s + "'");
        }
        c.split = parse_split(split_s);
        c.name = name;
        v.classes.push_back(std::move(c));
    }
    std::sort(v.classes.begin(), v.classes.end(), [](const VocabClass& a, const VocabClass& b) { return a.id < b.id; });
    try {
        v.validate();
    } catch (const DataError& e) {
        throw DataError(path + ": " + e.what());
    }
    return v;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocabulary: " + path);
    for (const auto& c : classes) out << c.id << '\t' << split_name(c.split) << '\t' << c.name << '\n';
}

std::string render_prompt(const std::string& classname) {
    if (classname.empty()) throw UsageError("render_prompt: classname must be nonempty");
    return "How can you recognize a video of a person performing the " + classname + " action?";
}

std::vector<double> aggregate_embeddings(const DescriptionSet& desc, bool prenormalize) {
    const size_t e = desc.embeddings.size();
    if (e == 0) throw DataError("class " + std::to_string(desc.class_id) + " has no description embeddings");
    const size_t dim = desc.embeddings[0].size();
    std::vector<std::vector<double>> vecs = desc.embeddings;
    for (auto& v : vecs) {
        if (v.size() != dim)
            throw DataError("class " + std::to_string(desc.class_id) + ": description embedding dims differ (" +
                            std::to_string(v.size()) + " vs " + std::to_string(dim) + ")");
        if (prenormalize) l2_normalize(v);
    }
    std::vector<double> mean(dim, 0.0);
    std::vector<double> addends(e);
    for (size_t j = 0; j < dim; ++j) {
        for (size_t r = 0; r < e; ++r) addends[r] = vecs[r][j];
        std::sort(addends.begin(), addends.end());
        double acc = 0.0;
        for (double a : addends) acc += a;
        mean[j] = acc / static_cast<double>(e);
    }
    return mean;
}

ClassEmbeddingTable build_table(const Vocabulary& vocab, const std::vector<DescriptionSet>& sets, bool prenormalize) {
    std::map<int, const DescriptionSet*> by_id;
    for (const auto& s : sets) {
        if (!by_id.emplace(s.class_id, &s).second)
            throw DataError("duplicate description set for class " + std::to_string(s.class_id));
    }
    ClassEmbeddingTable table;
    table.num_classes = static_cast<int>(vocab.size());
    for (const auto& c : vocab.classes) {
        auto it = by_id.find(c.id);
        if (it == by_id.end()) throw DataError("missing description set for class '" + c.name + "'");
        std::vector<double> row = aggregate_embeddings(*it->second, prenormalize);
        if (table.dim == 0) {
            table.dim = static_cast<int>(row.size());
            table.z.reserve(vocab.size() * row.size());
        } else if (static_cast<int>(row.size()) != table.dim) {
            throw DataError("class '" + c.name + "' embedding dim " + std::to_string(row.size()) +
                            " differs from table dim " + std::to_string(table.dim));
        }
        table.z.insert(table.z.end(), row.begin(), row.end());
    }
    for (double x : table.z)
        if (!std::isfinite(x)) throw DataError("embedding table contains non-finite values");
    return table;
}

SplitSelection select_split(const ClassEmbeddingTable& table, const Vocabulary& vocab, SplitFilter which) {
    if (table.num_classes != static_cast<int>(vocab.size()))
        throw DataError("table has " + std::to_string(table.num_classes) + " classes, vocabulary has " +
                        std::to_string(vocab.size()));
    SplitSelection sel;
    sel.table.dim = table.dim;
    for (const auto& c : vocab.classes) {
        const bool keep = which == SplitFilter::All || (which == SplitFilter::Base && c.split == Split::Base) ||
                          (which == SplitFilter::Novel && c.split == Split::Novel);
        if (!keep) continue;
        sel.class_ids.push_back(c.id);
        const double* r = table.row(c.id);
        sel.table.z.insert(sel.table.z.end(), r, r + table.dim);
    }
    sel.table.num_classes = static_cast<int>(sel.class_ids.size());
    if (sel.table.num_classes == 0) throw UsageError("selected split is empty");
    return sel;
}

ClassEmbeddingTable ClassEmbeddingTable::load(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("OVZL");
    const uint32_t ver = r.u32();
    if (ver != 1) throw FormatError(path + ": unsupported OVZL version " + std::to_string(ver));
    ClassEmbeddingTable t;
    t.num_classes = static_cast<int>(r.u32());
    t.dim = static_cast<int>(r.u32());
    if (t.num_classes < 0 || t.dim <= 0) throw FormatError(path + ": bad table header");
    t.z.resize(static_cast<size_t>(t.num_classes) * t.dim);
    r.f32s(t.z.data(), t.z.size());
    r.expect_eof();
    return t;
}

void ClassEmbeddingTable::save(const std::string& path) const {
    BinaryWriter w(path);
    w.magic("OVZL");
    w.u32(1);
    w.u32(static_cast<uint32_t>(num_classes));
    w.u32(static_cast<uint32_t>(dim));
    w.f32s(z.data(), z.size());
    w.close();
}

void save_description_sets(const std::string& path, const std::vector<DescriptionSet>& sets, int dim) {
    uint32_t e_max = 0;
    for (const auto& s : sets) e_max = std::max<uint32_t>(e_max, static_cast<uint32_t>(s.embeddings.size()));
    BinaryWriter w(path);
    w.magic("OVTB");
    w.u32(1);
    w.u32(static_cast<uint32_t>(sets.size()));
    w.u32(e_max);
    w.u32(static_cast<uint32_t>(dim));
    for (const auto& s : sets) {
        w.u32(static_cast<uint32_t>(s.class_id));
        w.u32(static_cast<uint32_t>(s.embeddings.size()));
        for (const auto& v : s.embeddings) {
            if (static_cast<int>(v.size()) != dim)
                throw DataError("class " + std::to_string(s.class_id) + ": embedding dim mismatch on save");
            w.f32s(v.data(), v.size());
        }
    }
    w.close();
}

std::vector<DescriptionSet> load_description_sets(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("OVTB");
    const uint32_t ver = r.u32();
    if (ver != 1) throw FormatError(path + ": unsupported OVTB version " + std::to_string(ver));
    const uint32_t a = r.u32();
    const uint32_t e_max = r.u32();
    const uint32_t dim = r.u32();
    if (dim == 0) throw FormatError(path + ": zero embedding dim");
    std::vector<DescriptionSet> sets;
    sets.reserve(a);
    for (uint32_t i = 0; i < a; ++i) {
        DescriptionSet s;
        s.class_id = static_cast<int>(r.u32());
        const uint32_t e = r.u32();
        if (e == 0 || e > e_max) throw FormatError(path + ": class " + std::to_string(s.class_id) + " has bad E");
        s.embeddings.assign(e, std::vector<double>(dim));
        for (auto& v : s.embeddings) r.f32s(v.data(), v.size());
        sets.push_back(std::move(s));
    }
    r.expect_eof();
    return sets;
}

void save_description_sidecar(const std::string& path, const Vocabulary& vocab,
                              const std::vector<DescriptionSet>& sets) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write sidecar: " + path);
    bool first = true;
    for (const auto& s : sets) {
        if (!first) out << '\n';
        first = false;
        out << "# " << s.class_id << '\t' << vocab.by_id(s.class_id).name << '\n';
        for (const auto& d : s.descriptions) out << d << '\n';
    }
}

DescriptionSet synth_description_set(uint64_t seed, const VocabClass& cls, int e_per_class, int dim,
                                     double desc_noise, int concept_dim) {
    if (e_per_class < 1) throw UsageError("synth_description_set: need at least one description");
    if (concept_dim < 0 || concept_dim > dim)
        throw UsageError("synth_description_set: concept_dim must lie in [0, dim]");
    // Class direction depends only on the name, so renamed-id vocabularies
    // still land near the same direction.
    std::vector<double> base(dim);
    {
        auto rng = make_rng(mix_seed(0xc1a55e5ULL, cls.name));
        std::normal_distribution<double> g(0.0, 1.0);
        if (concept_dim == 0) {
            for (double& x : base) x = g(rng);
        } else {
            // dictionary depends on (dim, concept_dim) only, never the class
            auto dict_rng = make_rng(mix_seed(0xd1c7ULL, static_cast<uint64_t>(dim) * 131071u + concept_dim));
            std::normal_distribution<double> gd(0.0, 1.0);
            std::vector<double> dict(static_cast<size_t>(dim) * concept_dim);
            for (double& x : dict) x = gd(dict_rng);
            std::vector<double> w(concept_dim);
            for (double& x : w) x = g(rng);
            for (int i = 0; i < dim; ++i) {
                double acc = 0.0;
                for (int k = 0; k < concept_dim; ++k) acc += dict[static_cast<size_t>(i) * concept_dim + k] * w[k];
                base[static_cast<size_t>(i)] = acc;
            }
        }
        l2_normalize(base);
    }
    DescriptionSet s;
    s.class_id = cls.id;
    // desc_noise is the expected perturbation norm relative to the unit
    // class direction, hence the 1/sqrt(dim) per-component scale.
    const double sigma = desc_noise / std::sqrt(static_cast<double>(dim));
    for (int r = 0; r < e_per_class; ++r) {
        auto rng = make_rng(splitmix64(mix_seed(seed, cls.name) + static_cast<uint64_t>(r)));
        std::normal_distribution<double> g(0.0, 1.0);
        std::vector<double> v(base);
        for (double& x : v) x += sigma * g(rng);
        l2_normalize(v);
        // Values are snapped to f32 so the OVTB file round-trips exactly.
        for (double& x : v) x = static_cast<double>(static_cast<float>(x));
        s.embeddings.push_back(std::move(v));
        s.descriptions.push_back(render_prompt(cls.name) + " [synthetic embedding " + std::to_string(r) + "]");
    }
    return s;
}

}  // namespace ovf
