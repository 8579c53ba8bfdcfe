// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

// Loss curve of a single training round on the toy scene.

#include "evsplat/config.hpp"
#include "evsplat/optimizer.hpp"
#include "evsplat/simulator.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <vector>

namespace evsplat {
namespace {

constexpr std::size_t kWindow = 500;

struct ToyCurve {
    std::size_t windows = 0;
    std::vector<double> moving_average;
};

const ToyCurve &
toy_curve() {
    static const ToyCurve curve = [] {
        AppConfig c = toy_config();
        const SimulatedDataset ds = simulate_dataset(toy_ground_truth(), c.sim);
        c.events.window_event_count = static_cast<long>(ds.events.events.size() / 100);
        c.sync();
        const TrainingDataset td = make_training_dataset(ds.events, ds.track, c.events, c.sim.color);
        TrainConfig t = c.train;
        t.rounds = 1;
        t.iterations = 2000;
        t.densify_until = 1000;
        const TrainResult r = train_progressive(td, t);

        ToyCurve out;
        out.windows = td.size();
        double sum = 0.0;
        for (std::size_t i = 0; i < r.log.rows.size(); ++i) {
            sum += r.log.rows[i].loss;
            if (i >= kWindow) {
                sum -= r.log.rows[i - kWindow].loss;
            }
            if (i + 1 >= kWindow) {
                out.moving_average.push_back(sum / kWindow);
            }
        }
        return out;
    }();
    return curve;
}

TEST(ToyTraining, HundredWindows) {
    EXPECT_NEAR(static_cast<double>(toy_curve().windows), 100.0, 2.0);
}

TEST(ToyTraining, LossHalvesOverTwoThousandIterations) {
    const std::vector<double> &ma = toy_curve().moving_average;
    ASSERT_FALSE(ma.empty());
    EXPECT_LE(ma.back(), 0.5 * ma.front()) << "first " << ma.front() << " last " << ma.back();
}

TEST(ToyTraining, MovingAverageNonIncreasingWithinFivePercent) {
    const std::vector<double> &ma = toy_curve().moving_average;
    double lowest = ma.front();
    for (std::size_t i = 0; i < ma.size(); ++i) {
        EXPECT_LE(ma[i], 1.05 * lowest) << "iteration " << i + kWindow;
        lowest = std::min(lowest, ma[i]);
    }
}

} // namespace
} // namespace evsplat
