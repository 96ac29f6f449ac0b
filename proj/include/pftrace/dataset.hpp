#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pftrace/common.hpp"

namespace pftrace {

// Inputs are N x d row-major. poison_mask is ground truth and is only read by
// evaluation code.
struct LabeledDataset {
    std::size_t n = 0;
    std::size_t d = 0;
    std::uint32_t num_classes = 0;
    std::vector<float> inputs;
    std::vector<std::uint32_t> labels;
    std::vector<std::uint8_t> poison_mask;
    std::vector<std::string> provenance;
    std::string id;

    std::span<const float> row(std::size_t i) const { return {inputs.data() + i * d, d}; }
    std::span<float> row(std::size_t i) { return {inputs.data() + i * d, d}; }
    std::size_t size() const { return n; }

    std::size_t poison_count() const {
        return static_cast<std::size_t>(std::count(poison_mask.begin(), poison_mask.end(), 1));
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> c(num_classes, 0);
        for (auto l : labels) ++c[l];
        return c;
    }
};

inline std::string compute_digest(const LabeledDataset& ds) {
    std::uint64_t h = kFnvOffset;
    const std::uint64_t header[3] = {ds.n, ds.d, ds.num_classes};
    h = fnv1a(header, sizeof(header), h);
    h = hash_values(ds.inputs, h);
    h = hash_values(ds.labels, h);
    h = hash_values(ds.poison_mask, h);
    for (const auto& p : ds.provenance) {
        const std::uint32_t len = static_cast<std::uint32_t>(p.size());
        h = fnv1a(&len, sizeof(len), h);
        h = fnv1a(p, h);
    }
    return "ds-" + hex64(h);
}

inline void validate(const LabeledDataset& ds) {
    require(ds.inputs.size() == ds.n * ds.d, "dataset: inputs size != n*d");
    require(ds.labels.size() == ds.n, "dataset: labels size != n");
    require(ds.poison_mask.size() == ds.n, "dataset: poison_mask size != n");
    require(ds.provenance.size() == ds.n, "dataset: provenance size != n");
    require(ds.num_classes >= 1, "dataset: num_classes must be >= 1");
    for (auto l : ds.labels) require(l < ds.num_classes, "dataset: label out of range");
    for (float v : ds.inputs) require(std::isfinite(v), "dataset: non-finite input value");
}

inline void seal(LabeledDataset& ds) {
    validate(ds);
    ds.id = compute_digest(ds);
}

// ---- slices ----

struct DatasetSlice {
    std::string parent;
    std::vector<std::size_t> indices;  // sorted, unique

    std::size_t size() const { return indices.size(); }
    bool empty() const { return indices.empty(); }
};

inline DatasetSlice make_slice(const LabeledDataset& ds, std::vector<std::size_t> indices) {
    std::sort(indices.begin(), indices.end());
    require(std::adjacent_find(indices.begin(), indices.end()) == indices.end(),
            "slice: duplicate index");
    require(indices.empty() || indices.back() < ds.n, "slice: index out of range");
    return {ds.id, std::move(indices)};
}

inline DatasetSlice full_slice(const LabeledDataset& ds) {
    std::vector<std::size_t> idx(ds.n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return {ds.id, std::move(idx)};
}

// Indices of [0, n) not in `s`.
inline DatasetSlice complement(const LabeledDataset& ds, const DatasetSlice& s) {
    std::vector<std::size_t> out;
    out.reserve(ds.n - s.size());
    std::size_t j = 0;
    for (std::size_t i = 0; i < ds.n; ++i) {
        if (j < s.indices.size() && s.indices[j] == i) {
            ++j;
            continue;
        }
        out.push_back(i);
    }
    return {ds.id, std::move(out)};
}

inline DatasetSlice slice_difference(const DatasetSlice& a, const DatasetSlice& b) {
    std::vector<std::size_t> out;
    std::set_difference(a.indices.begin(), a.indices.end(), b.indices.begin(), b.indices.end(),
                        std::back_inserter(out));
    return {a.parent, std::move(out)};
}

inline std::uint64_t slice_hash(const DatasetSlice& s) {
    return hash_values(s.indices, fnv1a(s.parent));
}

// Copies the selected rows into a new dataset (provenance and mask follow).
inline LabeledDataset subset(const LabeledDataset& ds, const std::vector<std::size_t>& idx) {
    LabeledDataset out;
    out.n = idx.size();
    out.d = ds.d;
    out.num_classes = ds.num_classes;
    out.inputs.reserve(out.n * out.d);
    for (auto i : idx) {
        auto r = ds.row(i);
        out.inputs.insert(out.inputs.end(), r.begin(), r.end());
        out.labels.push_back(ds.labels[i]);
        out.poison_mask.push_back(ds.poison_mask[i]);
        out.provenance.push_back(ds.provenance[i]);
    }
    seal(out);
    return out;
}

// ---- synthetic data ----

// K Gaussian blobs. Means are drawn from a standard normal and rescaled so the
// minimum pairwise distance is at least `class_separation`.
inline LabeledDataset forge_blobs(std::uint32_t num_classes, std::size_t per_class_count,
                                  std::size_t dim, double class_separation, double noise_sigma,
                                  std::uint64_t seed) {
    require(num_classes >= 2, "forge_blobs: K must be >= 2");
    require(dim >= 2, "forge_blobs: d must be >= 2");
    require(per_class_count >= 1, "forge_blobs: per_class_count must be >= 1");
    require(class_separation >= 0 && noise_sigma >= 0, "forge_blobs: negative scale");

    Rng mean_rng(derive_seed(seed, "forge.means"));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> means(num_classes * dim);
    for (auto& m : means) m = gauss(mean_rng);

    double min_dist = std::numeric_limits<double>::infinity();
    for (std::uint32_t a = 0; a < num_classes; ++a) {
        for (std::uint32_t b = a + 1; b < num_classes; ++b) {
            double s = 0;
            for (std::size_t j = 0; j < dim; ++j) {
                double diff = means[a * dim + j] - means[b * dim + j];
                s += diff * diff;
            }
            min_dist = std::min(min_dist, std::sqrt(s));
        }
    }
    const double scale = min_dist > 0 ? class_separation / min_dist : 1.0;
    for (auto& m : means) m *= scale;

    LabeledDataset ds;
    ds.n = num_classes * per_class_count;
    ds.d = dim;
    ds.num_classes = num_classes;
    ds.inputs.resize(ds.n * dim);
    ds.labels.resize(ds.n);
    ds.poison_mask.assign(ds.n, 0);
    ds.provenance.resize(ds.n);

    Rng noise_rng(derive_seed(seed, "forge.noise"));
    std::size_t i = 0;
    // Interleave classes so that prefixes are class-balanced.
    for (std::size_t ord = 0; ord < per_class_count; ++ord) {
        for (std::uint32_t c = 0; c < num_classes; ++c, ++i) {
            for (std::size_t j = 0; j < dim; ++j) {
                ds.inputs[i * dim + j] =
                    static_cast<float>(means[c * dim + j] + noise_sigma * gauss(noise_rng));
            }
            ds.labels[i] = c;
            ds.provenance[i] = "src-" + std::to_string(c) + "-" + std::to_string(ord);
        }
    }
    seal(ds);
    return ds;
}

struct SplitResult {
    LabeledDataset train;
    LabeledDataset test;
};

// Stratified split. The train size is round(fraction * N); per-class train
// counts use largest-remainder rounding so every class is within one sample
// of its exact share.
inline SplitResult split(const LabeledDataset& ds, double train_fraction, std::uint64_t seed) {
    require(train_fraction > 0.0 && train_fraction < 1.0, "split: fraction must be in (0,1)");
    std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
    for (std::size_t i = 0; i < ds.n; ++i) by_class[ds.labels[i]].push_back(i);
    for (std::uint32_t c = 0; c < ds.num_classes; ++c) {
        if (!by_class[c].empty() && by_class[c].size() < 2) {
            throw PreconditionError("split: class " + std::to_string(c) + " has fewer than 2 samples");
        }
    }

    const auto target_total = static_cast<std::size_t>(std::llround(train_fraction * ds.n));
    std::vector<std::size_t> take(ds.num_classes);
    std::vector<std::pair<double, std::uint32_t>> remainders;
    std::size_t assigned = 0;
    for (std::uint32_t c = 0; c < ds.num_classes; ++c) {
        const double exact = train_fraction * static_cast<double>(by_class[c].size());
        take[c] = static_cast<std::size_t>(std::floor(exact));
        assigned += take[c];
        remainders.emplace_back(exact - std::floor(exact), c);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; assigned < target_total && r < remainders.size(); ++r) {
        ++take[remainders[r].second];
        ++assigned;
    }

    Rng rng(derive_seed(seed, "split"));
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> test_idx;
    for (std::uint32_t c = 0; c < ds.num_classes; ++c) {
        auto members = by_class[c];
        shuffle_in_place(members, rng);
        train_idx.insert(train_idx.end(), members.begin(), members.begin() + take[c]);
        test_idx.insert(test_idx.end(), members.begin() + take[c], members.end());
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());
    return {subset(ds, train_idx), subset(ds, test_idx)};
}

// ---- persistence (.pfds) ----

inline constexpr char kDatasetMagic[4] = {'P', 'F', 'D', 'S'};
inline constexpr std::uint32_t kDatasetFormatVersion = 1;

namespace detail {

template <class T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void put_array(std::ostream& os, const std::vector<T>& v) {
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
}

class Reader {
public:
    Reader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

    template <class T>
    T get() {
        T v{};
        read(&v, sizeof(T));
        return v;
    }

    template <class T>
    void get_array(std::vector<T>& v, std::size_t count) {
        v.resize(count);
        read(v.data(), count * sizeof(T));
    }

    void read(void* dst, std::size_t bytes) {
        is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(bytes));
        if (static_cast<std::size_t>(is_.gcount()) != bytes) {
            throw FormatError(what_ + ": truncated file");
        }
    }

private:
    std::istream& is_;
    std::string what_;
};

inline std::uintmax_t remaining_bytes(std::istream& is) {
    const auto here = is.tellg();
    is.seekg(0, std::ios::end);
    const auto end = is.tellg();
    is.seekg(here);
    return static_cast<std::uintmax_t>(end - here);
}

}  // namespace detail

inline void write_dataset(std::ostream& os, const LabeledDataset& ds) {
    os.write(kDatasetMagic, 4);
    detail::put(os, kDatasetFormatVersion);
    detail::put(os, static_cast<std::uint64_t>(ds.n));
    detail::put(os, static_cast<std::uint64_t>(ds.d));
    detail::put(os, ds.num_classes);
    detail::put_array(os, ds.inputs);
    detail::put_array(os, ds.labels);
    detail::put_array(os, ds.poison_mask);
    for (const auto& p : ds.provenance) {
        detail::put(os, static_cast<std::uint32_t>(p.size()));
        os.write(p.data(), static_cast<std::streamsize>(p.size()));
    }
}

inline LabeledDataset read_dataset(std::istream& is) {
    detail::Reader r(is, "pfds");
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, kDatasetMagic, 4) != 0) throw FormatError("pfds: bad magic");
    const auto version = r.get<std::uint32_t>();
    if (version != kDatasetFormatVersion) {
        throw VersionError("pfds: unsupported format version " + std::to_string(version));
    }
    LabeledDataset ds;
    ds.n = r.get<std::uint64_t>();
    ds.d = r.get<std::uint64_t>();
    ds.num_classes = r.get<std::uint32_t>();
    // Guard against absurd sizes from a corrupted header before allocating.
    if (ds.d != 0 && ds.n > std::numeric_limits<std::uint32_t>::max() / ds.d) {
        throw FormatError("pfds: implausible header dimensions");
    }
    const std::uintmax_t need = ds.n * ds.d * 4 + ds.n * 5;
    if (detail::remaining_bytes(is) < need) throw FormatError("pfds: truncated file");
    r.get_array(ds.inputs, ds.n * ds.d);
    r.get_array(ds.labels, ds.n);
    r.get_array(ds.poison_mask, ds.n);
    ds.provenance.resize(ds.n);
    for (auto& p : ds.provenance) {
        const auto len = r.get<std::uint32_t>();
        if (detail::remaining_bytes(is) < len) throw FormatError("pfds: truncated file");
        p.resize(len);
        r.read(p.data(), len);
    }
    try {
        seal(ds);
    } catch (const ContractViolation& e) {
        throw FormatError(std::string("pfds: invalid content: ") + e.what());
    }
    return ds;
}

inline void save_dataset(const std::filesystem::path& path, const LabeledDataset& ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path.string() + " for writing");
    write_dataset(os, ds);
    if (!os) throw Error("write failed: " + path.string());
}

inline LabeledDataset load_dataset(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path.string());
    return read_dataset(is);
}

inline nlohmann::json manifest_json(const LabeledDataset& ds) {
    nlohmann::json j;
    j["id"] = ds.id;
    j["n"] = ds.n;
    j["d"] = ds.d;
    j["num_classes"] = ds.num_classes;
    j["class_counts"] = ds.class_counts();
    j["poison_count"] = ds.poison_count();
    auto& rows = j["rows"] = nlohmann::json::array();
    for (std::size_t i = 0; i < ds.n; ++i) {
        rows.push_back({{"index", i},
                        {"label", ds.labels[i]},
                        {"poison", ds.poison_mask[i] != 0},
                        {"provenance", ds.provenance[i]}});
    }
    return j;
}

}  // namespace pftrace
