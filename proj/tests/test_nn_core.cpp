#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "pftrace/nn.hpp"

using namespace pftrace;

namespace {

double fd_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    double num = 0;
    double den = 1e-12;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num = std::max(num, std::abs(a[i] - b[i]));
        den = std::max(den, std::max(std::abs(a[i]), std::abs(b[i])));
    }
    return num / den;
}

}  // namespace

TEST(Forward, SoftmaxSumsToOne) {
    const auto m = initialize<float>(Architecture{{4, 6, 3}}, 1);
    const std::vector<float> x{0.5f, -1.0f, 2.0f, 0.1f};
    const auto f = forward<float>(m, x);
    double s = 0;
    for (auto p : f.probabilities) s += p;
    EXPECT_NEAR(s, 1.0, 1e-6);
    EXPECT_EQ(f.penultimate.size(), 6u);
    EXPECT_THROW(forward<float>(m, std::vector<float>{1.0f}), ContractViolation);
}

TEST(Forward, HandComputedSingleLayer) {
    auto m = initialize<double>(Architecture{{2, 2}}, 0);
    m.layers[0].weight = {1, 0, 0, 1};
    m.layers[0].bias = {0, 0};
    const auto p = forward<double>(m, std::vector<double>{std::log(3.0), 0.0}).probabilities;
    EXPECT_NEAR(p[0], 0.75, 1e-12);
    EXPECT_NEAR(loss_ce<double>(p, Target::hard(1)), -std::log(0.25), 1e-12);
    const std::vector<double> u{0.5, 0.5};
    EXPECT_NEAR(loss_ce<double>(p, Target::soft(u)), -0.5 * (std::log(0.75) + std::log(0.25)), 1e-12);
}

TEST(Gradients, FinalLayerIsOuterProduct) {
    const auto m = initialize<double>(Architecture{{3, 4, 3}}, 5);
    const std::vector<double> x{0.3, -0.2, 0.9};
    const auto f = forward<double>(m, x);
    const auto g = grad_weights<double>(m, x, Target::hard(2));
    const auto& last = g.layers.back();
    for (std::size_t o = 0; o < 3; ++o) {
        const double delta = f.probabilities[o] - (o == 2 ? 1.0 : 0.0);
        for (std::size_t i = 0; i < 4; ++i) {
            EXPECT_NEAR(last.weight[o * 4 + i], delta * f.penultimate[i], 1e-12);
        }
        EXPECT_NEAR(last.bias[o], delta, 1e-12);
    }
}

TEST(Gradients, MatchCentralDifferences) {
    for (std::uint64_t t = 0; t < 10; ++t) {
        auto m = initialize<double>(Architecture{{5, 7, 4}}, t);
        for (auto& b : m.layers[0].bias) b = 0.05;
        Rng rng(t);
        std::vector<double> x(5);
        for (auto& v : x) v = uniform01(rng) * 2 - 1;
        const auto target = Target::hard(static_cast<std::uint32_t>(t % 4));
        auto loss = [&](const BasicClassifier<double>& mm, const std::vector<double>& xx) {
            return loss_ce<double>(forward<double>(mm, xx).probabilities, target);
        };
        const double h = 1e-6;
        auto p = m.flat_parameters();
        std::vector<double> fd(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) {
            auto a = m;
            auto b = m;
            auto q = p;
            q[i] += h;
            a.set_flat_parameters(q);
            q[i] -= 2 * h;
            b.set_flat_parameters(q);
            fd[i] = (loss(a, x) - loss(b, x)) / (2 * h);
        }
        EXPECT_LT(fd_rel_err(grad_weights<double>(m, x, target).flat(), fd), 1e-4);
        std::vector<double> fdx(5);
        for (std::size_t i = 0; i < 5; ++i) {
            auto xp = x;
            auto xn = x;
            xp[i] += h;
            xn[i] -= h;
            fdx[i] = (loss(m, xp) - loss(m, xn)) / (2 * h);
        }
        EXPECT_LT(fd_rel_err(grad_input<double>(m, x, target), fdx), 1e-4);
    }
}

TEST(Gradients, PenultimateVjpMatchesFiniteDifference) {
    const auto m = initialize<double>(Architecture{{4, 5, 3}}, 2);
    const std::vector<double> x{0.4, -0.3, 0.8, 0.1};
    const std::vector<double> up{0.3, -1.0, 0.5, 0.2, 0.7};
    const auto g = vjp_penultimate<double>(m, x, up);
    const double h = 1e-6;
    for (std::size_t i = 0; i < 4; ++i) {
        auto xp = x;
        auto xn = x;
        xp[i] += h;
        xn[i] -= h;
        const auto hp = forward<double>(m, xp).penultimate;
        const auto hn = forward<double>(m, xn).penultimate;
        double fd = 0;
        for (std::size_t k = 0; k < 5; ++k) fd += up[k] * (hp[k] - hn[k]) / (2 * h);
        EXPECT_NEAR(g[i], fd, 1e-6);
    }
}

TEST(Training, LearnsSeparableBlobsDeterministically) {
    const auto ds = forge_blobs(3, 60, 6, 5.0, 0.5, 4);
    const Architecture arch{{6, 8, 3}};
    const TrainConfig cfg{5, 16, 0.05, 0, 0};
    TrainStats stats;
    const auto m = train(ds, arch, cfg, 9, &stats);
    EXPECT_GT(accuracy(m, ds), 0.95);
    ASSERT_EQ(stats.epoch_mean_loss.size(), 5u);
    EXPECT_LT(stats.epoch_mean_loss.back(), stats.epoch_mean_loss.front());
    EXPECT_EQ(model_digest(train(ds, arch, cfg, 9)), model_digest(m));
    EXPECT_NE(model_digest(train(ds, arch, cfg, 10)), model_digest(m));
}

TEST(Training, FrozenLayersStayFixed) {
    const auto ds = forge_blobs(3, 20, 4, 3.0, 0.5, 1);
    const auto base = train(ds, Architecture{{4, 5, 3}}, {2, 8, 0.05, 0, 0}, 3);
    TrainConfig ft{3, 8, 0.1, 0, 1};
    const auto tuned = fine_tune(base, shuffled_plan(ds, full_slice(ds).indices, 8, 1), ft);
    EXPECT_EQ(tuned.layers[0], base.layers[0]);
    EXPECT_NE(tuned.layers[1], base.layers[1]);
}

TEST(Training, DivergenceIsReported) {
    auto ds = forge_blobs(2, 20, 4, 1e30, 0.0, 1);
    EXPECT_THROW(train(ds, Architecture{{4, 2}}, {3, 4, 1e30, 0, 0}, 1), TrainingDiverged);
}

TEST(Training, ContractChecks) {
    const auto ds = forge_blobs(2, 4, 4, 3.0, 0.5, 1);
    EXPECT_THROW(train(ds, Architecture{{5, 2}}, {}, 1), ContractViolation);
    EXPECT_THROW(train(ds, Architecture{{4, 3}}, {}, 1), ContractViolation);
    EXPECT_THROW(train(ds, Architecture{{4, 2}}, {1, 32, 0.1, 0, 0}, 1), ContractViolation);
    EXPECT_THROW(train(ds, Architecture{{4, 2}}, {1, 2, 0.0, 0, 0}, 1), ContractViolation);
}

TEST(EventLoss, MatchesProbabilityForm) {
    const auto ds = forge_blobs(3, 20, 4, 3.0, 0.5, 1);
    const auto m = train(ds, Architecture{{4, 5, 3}}, {2, 8, 0.05, 0, 0}, 3);
    for (std::uint32_t y = 0; y < 3; ++y) {
        const auto p = forward<float>(m, ds.row(0)).probabilities;
        EXPECT_NEAR(event_loss(m, ds.row(0), y), -std::log(static_cast<double>(p[y])), 1e-4);
    }
    EXPECT_THROW(event_loss(m, ds.row(0), 3), ContractViolation);
}

TEST(Persistence, ModelRoundTrip) {
    const auto ds = forge_blobs(3, 10, 4, 3.0, 0.5, 1);
    const auto m = train(ds, Architecture{{4, 5, 3}}, {2, 8, 0.05, 7, 0}, 3);
    const auto dir = std::filesystem::temp_directory_path() / "pftrace_nn_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "m.bin";
    save_model(path, m);
    const auto back = load_model(path);
    EXPECT_EQ(back, m);
    EXPECT_EQ(model_digest(back), model_digest(m));

    {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        os << "PFMW";
    }
    EXPECT_THROW(load_model(path), FormatError);
    {
        std::ofstream os(sidecar_path(path), std::ios::trunc);
        os << "{\"arch\":[4,3],\"format_version\":7}";
    }
    EXPECT_THROW(load_model(path), VersionError);
    std::filesystem::remove_all(dir);
    EXPECT_THROW(load_model(path), FormatError);
}

TEST(TrainConfigJson, RoundTrip) {
    const TrainConfig c{7, 16, 0.25, 3, 1};
    EXPECT_EQ(train_config_from_json(to_json(c)), c);
}
