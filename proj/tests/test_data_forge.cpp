#include <gtest/gtest.h>

#include <sstream>

#include "pftrace/dataset.hpp"

using namespace pftrace;

TEST(Forge, ShapesAndBalance) {
    const auto ds = forge_blobs(4, 25, 8, 5.0, 1.0, 3);
    EXPECT_EQ(ds.n, 100u);
    EXPECT_EQ(ds.d, 8u);
    EXPECT_EQ(ds.inputs.size(), 800u);
    for (auto c : ds.class_counts()) EXPECT_EQ(c, 25u);
    EXPECT_EQ(ds.poison_count(), 0u);
    EXPECT_EQ(ds.id, compute_digest(ds));
    EXPECT_EQ(ds.provenance[0], "src-0-0");
}

TEST(Forge, ZeroNoiseGivesMeansAtSeparation) {
    const auto ds = forge_blobs(5, 2, 6, 4.0, 0.0, 11);
    double min_d = 1e300;
    for (std::uint32_t a = 0; a < 5; ++a) {
        for (std::uint32_t b = a + 1; b < 5; ++b) {
            double s = 0;
            for (std::size_t j = 0; j < 6; ++j) {
                const double diff = ds.row(a)[j] - ds.row(b)[j];
                s += diff * diff;
            }
            min_d = std::min(min_d, std::sqrt(s));
        }
    }
    EXPECT_NEAR(min_d, 4.0, 1e-5);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(ds.row(0)[j], ds.row(5)[j]);
}

TEST(Forge, SeedDeterminism) {
    EXPECT_EQ(forge_blobs(3, 10, 4, 2, 1, 7).id, forge_blobs(3, 10, 4, 2, 1, 7).id);
    EXPECT_NE(forge_blobs(3, 10, 4, 2, 1, 7).id, forge_blobs(3, 10, 4, 2, 1, 8).id);
}

TEST(Forge, RejectsBadArguments) {
    EXPECT_THROW(forge_blobs(1, 10, 4, 2, 1, 0), ContractViolation);
    EXPECT_THROW(forge_blobs(3, 10, 1, 2, 1, 0), ContractViolation);
    EXPECT_THROW(forge_blobs(3, 0, 4, 2, 1, 0), ContractViolation);
    EXPECT_THROW(forge_blobs(3, 10, 4, -1, 1, 0), ContractViolation);
}

TEST(Split, StratifiedWithinOne) {
    const auto ds = forge_blobs(3, 17, 4, 3, 1, 5);
    const auto sp = split(ds, 0.7, 9);
    EXPECT_EQ(sp.train.n + sp.test.n, ds.n);
    EXPECT_EQ(sp.train.n, static_cast<std::size_t>(std::llround(0.7 * ds.n)));
    for (auto c : sp.train.class_counts()) {
        EXPECT_LE(std::abs(static_cast<double>(c) - 0.7 * 17), 1.0);
    }
    EXPECT_EQ(split(ds, 0.7, 9).train.id, sp.train.id);
}

TEST(Split, TinyClassIsPrecondition) {
    auto ds = forge_blobs(2, 1, 4, 3, 1, 5);
    EXPECT_THROW(split(ds, 0.5, 1), PreconditionError);
    EXPECT_THROW(split(ds, 1.0, 1), ContractViolation);
}

TEST(Slices, ComplementDifferenceHash) {
    const auto ds = forge_blobs(2, 5, 3, 3, 1, 1);
    const auto s = make_slice(ds, {7, 2, 4});
    EXPECT_EQ(s.indices, (std::vector<std::size_t>{2, 4, 7}));
    const auto c = complement(ds, s);
    EXPECT_EQ(c.size(), 7u);
    EXPECT_EQ(slice_difference(full_slice(ds), s).indices, c.indices);
    EXPECT_EQ(slice_hash(s), slice_hash(make_slice(ds, {2, 4, 7})));
    EXPECT_NE(slice_hash(s), slice_hash(make_slice(ds, {2, 4})));
    EXPECT_THROW(make_slice(ds, {1, 1}), ContractViolation);
    EXPECT_THROW(make_slice(ds, {10}), ContractViolation);
}

TEST(Subset, CarriesMaskAndProvenance) {
    auto ds = forge_blobs(2, 5, 3, 3, 1, 1);
    ds.poison_mask[3] = 1;
    seal(ds);
    const auto sub = subset(ds, {3, 8});
    EXPECT_EQ(sub.n, 2u);
    EXPECT_EQ(sub.poison_mask[0], 1);
    EXPECT_EQ(sub.provenance[1], ds.provenance[8]);
}

TEST(Persistence, RoundTripIsExact) {
    auto ds = forge_blobs(3, 4, 5, 2, 1, 2);
    ds.poison_mask[1] = 1;
    ds.provenance[1] = "atk-x-0";
    seal(ds);
    std::stringstream ss;
    write_dataset(ss, ds);
    const auto back = read_dataset(ss);
    EXPECT_EQ(back.id, ds.id);
    EXPECT_EQ(back.inputs, ds.inputs);
    EXPECT_EQ(back.provenance, ds.provenance);
}

TEST(Persistence, CorruptInputsAreFormatErrors) {
    const auto ds = forge_blobs(2, 3, 4, 2, 1, 2);
    std::stringstream ss;
    write_dataset(ss, ds);
    const std::string bytes = ss.str();

    std::stringstream bad_magic("XXXX" + bytes.substr(4));
    EXPECT_THROW(read_dataset(bad_magic), FormatError);

    std::string v = bytes;
    v[4] = 9;
    std::stringstream bad_version(v);
    EXPECT_THROW(read_dataset(bad_version), VersionError);

    std::stringstream truncated(bytes.substr(0, bytes.size() - 7));
    EXPECT_THROW(read_dataset(truncated), FormatError);

    std::string lab = bytes;
    const std::size_t label_off = 4 + 4 + 8 + 8 + 4 + ds.n * ds.d * 4;
    lab[label_off] = 99;
    std::stringstream bad_label(lab);
    EXPECT_THROW(read_dataset(bad_label), FormatError);
}

TEST(Manifest, CountsAndRows) {
    auto ds = forge_blobs(2, 3, 4, 2, 1, 2);
    const auto j = manifest_json(ds);
    EXPECT_EQ(j.at("n"), 6);
    EXPECT_EQ(j.at("rows").size(), 6u);
    EXPECT_EQ(j.at("id"), ds.id);
}

TEST(Seeds, DeriveIsStableAndDistinct) {
    EXPECT_EQ(derive_seed(1, "a"), splitmix64(1 ^ fnv1a("a")));
    EXPECT_NE(derive_seed(1, "a"), derive_seed(1, "b"));
    EXPECT_NE(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
    EXPECT_EQ(fnv1a(""), kFnvOffset);
}
