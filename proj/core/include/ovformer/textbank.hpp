#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ovf {

enum class Split { Super, Base, Novel };

const char* split_name(Split s);
Split parse_split(const std::string& s);

struct VocabClass {
    int id = 0;
    std::string name;
    Split split = Split::Base;
};

// Ordered class list; ids are unique and contiguous from 0, names unique
// after whitespace/case normalization.
struct Vocabulary {
    std::vector<VocabClass> classes;  // sorted by id

    size_t size() const { return classes.size(); }
    const VocabClass& by_id(int id) const;
    bool has_id(int id) const;

    void validate() const;

    static Vocabulary load(const std::string& path);
    void save(const std::string& path) const;
};

struct DescriptionSet {
    int class_id = 0;
    std::vector<std::string> descriptions;             // may be empty (audit sidecar only)
    std::vector<std::vector<double>> embeddings;       // E vectors of dim s
};

// One aggregated embedding per class, row order = class_id.
struct ClassEmbeddingTable {
    int num_classes = 0;
    int dim = 0;
    std::vector<double> z;  // num_classes x dim, row-major

    const double* row(int class_id) const { return z.data() + static_cast<size_t>(class_id) * dim; }

    static ClassEmbeddingTable load(const std::string& path);
    void save(const std::string& path) const;
};

struct SplitSelection {
    ClassEmbeddingTable table;
    std::vector<int> class_ids;  // row i of table <- original class_ids[i]
};

enum class SplitFilter { Base, Novel, All };

SplitFilter parse_split_filter(const std::string& s);

// Exact query template used to solicit class descriptions.
std::string render_prompt(const std::string& classname);

// Componentwise mean of the E description embeddings. Addends are summed in
// sorted order per component, which makes the result exactly invariant to
// description order. With prenormalize set, each vector is L2-normalized
// before averaging (off by default).
std::vector<double> aggregate_embeddings(const DescriptionSet& desc, bool prenormalize = false);

ClassEmbeddingTable build_table(const Vocabulary& vocab, const std::vector<DescriptionSet>& sets,
                                bool prenormalize = false);

SplitSelection select_split(const ClassEmbeddingTable& table, const Vocabulary& vocab, SplitFilter which);

// Description-embedding file ("OVTB") plus optional UTF-8 sidecar of texts.
void save_description_sets(const std::string& path, const std::vector<DescriptionSet>& sets, int dim);
std::vector<DescriptionSet> load_description_sets(const std::string& path);
void save_description_sidecar(const std::string& path, const Vocabulary& vocab,
                              const std::vector<DescriptionSet>& sets);

// Deterministic stand-in for a text encoder: a unit-norm class direction
// derived from the class name alone, perturbed per description with noise
// drawn from (seed, name, r). The same name maps to nearby embeddings under
// different seeds, which is what ties split vocabularies together.
// concept_dim > 0 draws the class direction from a fixed concept dictionary
// of that rank instead of isotropically; class directions then share a
// low-dimensional subspace the way text-encoder embeddings do.
DescriptionSet synth_description_set(uint64_t seed, const VocabClass& cls, int e_per_class, int dim,
                                     double desc_noise, int concept_dim = 0);

}  // namespace ovf
