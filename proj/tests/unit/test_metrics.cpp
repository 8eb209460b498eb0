#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "p4d/metrics/metrics.hpp"
#include "p4d/util/rng.hpp"

using namespace p4d::metrics;

namespace {

// Classes 0, 1 are stuff; 2, 3 are things.
MetricConfig four_classes() {
    MetricConfig c;
    c.thing = {false, false, true, true};
    return c;
}

struct Instance {
    PanopticLabeling pred, gt;
};

// Up to 3 frames, 20 points per frame and 4 ground-truth tracks, each with a
// fixed thing class. Predictions are noisy copies with their own id pool.
Instance random_instance(p4d::util::Rng& rng) {
    Instance in;
    const auto frames = static_cast<std::size_t>(rng.uniform_int(1, 3));
    const auto tracks = static_cast<int>(rng.uniform_int(0, 4));
    std::vector<std::uint16_t> track_cls(static_cast<std::size_t>(tracks) + 1);
    for (int t = 1; t <= tracks; ++t) track_cls[static_cast<std::size_t>(t)] = static_cast<std::uint16_t>(rng.uniform_int(2, 3));
    const double noise = rng.uniform(0.0, 0.6);
    for (std::size_t f = 0; f < frames; ++f) {
        const auto n = static_cast<std::size_t>(rng.uniform_int(1, 20));
        std::vector<std::uint16_t> gc(n), pc(n);
        std::vector<std::uint32_t> gt(n), pt(n);
        for (std::size_t i = 0; i < n; ++i) {
            if (tracks > 0 && rng.uniform() < 0.6) {
                gt[i] = static_cast<std::uint32_t>(rng.uniform_int(1, tracks));
                gc[i] = track_cls[gt[i]];
            } else {
                gc[i] = static_cast<std::uint16_t>(rng.uniform_int(0, 1));
            }
            if (rng.uniform() < noise) {
                pc[i] = static_cast<std::uint16_t>(rng.uniform_int(0, 3));
                pt[i] = static_cast<std::uint32_t>(rng.uniform_int(0, 5));
            } else {
                pc[i] = gc[i];
                // Consistent relabelling plus occasional swaps creates switches.
                pt[i] = gt[i] == 0 ? 0 : gt[i] + 10 + (rng.uniform() < 0.15 ? 1u : 0u);
            }
        }
        in.gt.cls.push_back(gc);
        in.gt.track.push_back(gt);
        in.pred.cls.push_back(pc);
        in.pred.track.push_back(pt);
    }
    return in;
}

PanopticLabeling single_frame(std::vector<std::uint16_t> cls, std::vector<std::uint32_t> track) {
    PanopticLabeling l;
    l.cls.push_back(std::move(cls));
    l.track.push_back(std::move(track));
    return l;
}

}  // namespace

TEST(MetricOracle, AgreesOnRandomTinyInstances) {
    p4d::util::Rng rng(77);
    const auto start = std::chrono::steady_clock::now();
    double worst = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const auto in = random_instance(rng);
        const double d = max_discrepancy(evaluate(in.pred, in.gt, four_classes()),
                                         oracle_evaluate(in.pred, in.gt, four_classes()));
        worst = std::max(worst, d);
        ASSERT_LT(d, 1e-9) << "trial " << trial;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    RecordProperty("max_discrepancy", std::to_string(worst));
    EXPECT_LT(secs, 10.0);
}

TEST(MetricIdentities, GroundTruthAsPredictionScoresOne) {
    p4d::util::Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const auto in = random_instance(rng);
        const auto r = evaluate(in.gt, in.gt, four_classes());
        for (double v : {r.miou, r.pq, r.sq, r.rq, r.pq_dagger, r.ptq, r.sptq, r.s_assoc, r.s_cls, r.lstq, r.tq, r.pat})
            EXPECT_EQ(v, 1.0);
    }
}

TEST(MetricIdentities, PqIsSqTimesRqAndSptqDominatesPtq) {
    p4d::util::Rng rng(6);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto in = random_instance(rng);
        const auto r = evaluate(in.pred, in.gt, four_classes());
        for (const auto& c : r.per_class) {
            EXPECT_NEAR(c.pq, c.sq * c.rq, 1e-12);
            EXPECT_GE(c.sptq, c.ptq);
        }
        EXPECT_GE(r.sptq, r.ptq);
        for (double v : {r.miou, r.pq, r.sq, r.rq, r.pq_dagger, r.ptq, r.sptq, r.s_assoc, r.lstq, r.tq, r.pat}) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(MetricIdentities, InvariantUnderPredictedIdBijection) {
    p4d::util::Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        auto in = random_instance(rng);
        const auto before = evaluate(in.pred, in.gt, four_classes());
        for (auto& frame : in.pred.track)
            for (auto& t : frame)
                if (t > 0) t = 1000 - t;
        EXPECT_EQ(max_discrepancy(before, evaluate(in.pred, in.gt, four_classes())), 0.0);
    }
}

TEST(MetricIdentities, StreamingEqualsBatch) {
    p4d::util::Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        const auto in = random_instance(rng);
        Evaluator ev(four_classes());
        for (std::size_t f = 0; f < in.gt.frames(); ++f)
            ev.add_frame(in.pred.cls[f], in.pred.track[f], in.gt.cls[f], in.gt.track[f]);
        EXPECT_EQ(ev.report().csv_row(), evaluate(in.pred, in.gt, four_classes()).csv_row());
    }
}

TEST(MetricIdentities, CorrectionNeverLowersFamilyMeans) {
    p4d::util::Rng rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        const auto in = random_instance(rng);
        const auto noisy = evaluate(in.pred, in.gt, four_classes());
        const auto fixed = evaluate(in.gt, in.gt, four_classes());
        EXPECT_GE(fixed.pq, noisy.pq);
        EXPECT_GE(fixed.ptq, noisy.ptq);
        EXPECT_GE(fixed.lstq, noisy.lstq);
        EXPECT_GE(fixed.pat, noisy.pat);
        EXPECT_GE(fixed.miou, noisy.miou);
    }
}

TEST(SemanticIou, HalfOverlapIsOneThird) {
    MetricConfig c;
    c.thing = {false, false};
    // Class 1 predicted on points 0-3, present in ground truth on points 2-5.
    const auto pred = single_frame({1, 1, 1, 1, 0, 0}, std::vector<std::uint32_t>(6, 0));
    const auto gt = single_frame({0, 0, 1, 1, 1, 1}, std::vector<std::uint32_t>(6, 0));
    const auto r = evaluate(pred, gt, c);
    EXPECT_DOUBLE_EQ(r.per_class[1].iou, 2.0 / 6.0);
    EXPECT_DOUBLE_EQ(r.per_class[0].iou, 0.0);
}

TEST(SemanticIou, AbsentClassIsExcluded) {
    MetricConfig c;
    c.thing = {false, false, false};
    const auto l = single_frame({0, 0, 1}, {0, 0, 0});
    const auto r = evaluate(l, l, c);
    EXPECT_FALSE(r.per_class[2].iou_defined);
    EXPECT_EQ(r.miou, 1.0);
}

TEST(PanopticQuality, OneMatchAndOneFalsePositive) {
    MetricConfig c;
    c.thing = {false, true};
    // GT instance of 5 points; prediction covers 4 of them (IoU 0.8) and adds
    // a separate 3-point instance over stuff.
    const auto gt = single_frame({1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0},
                                 {1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
    const auto pred = single_frame({1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1},
                                   {7, 7, 7, 7, 0, 0, 0, 0, 0, 0, 0, 0, 9, 9, 9});
    const auto r = evaluate(pred, gt, c);
    const auto& thing = r.per_class[1];
    EXPECT_EQ(thing.tp, 1);
    EXPECT_EQ(thing.fp, 1);
    EXPECT_EQ(thing.fn, 0);
    EXPECT_NEAR(thing.pq, 0.8 / 1.5, 1e-15);
}

TEST(PanopticQuality, IouOfExactlyHalfIsNotAMatch) {
    MetricConfig c;
    c.thing = {false, true};
    const auto gt = single_frame({1, 1, 0, 0}, {1, 1, 0, 0});
    const auto pred = single_frame({1, 1, 1, 1}, {3, 3, 3, 3});
    const auto r = evaluate(pred, gt, c);
    EXPECT_EQ(r.per_class[1].tp, 0);
    EXPECT_EQ(r.per_class[1].fp, 1);
    EXPECT_EQ(r.per_class[1].fn, 1);
}

TEST(PanopticQuality, EmptyPredictionScoresZero) {
    MetricConfig c;
    c.thing = {false, true, false};
    const auto gt = single_frame({1, 1, 0, 0}, {4, 4, 0, 0});
    const auto pred = single_frame({2, 2, 2, 2}, {0, 0, 0, 0});
    const auto r = evaluate(pred, gt, c);
    EXPECT_EQ(r.pq, 0.0);
    EXPECT_EQ(r.s_assoc, 0.0);
    EXPECT_EQ(r.lstq, 0.0);
}

TEST(TrackingQuality, OneSwitchHalvesPtq) {
    MetricConfig c;
    c.thing = {false, true};
    PanopticLabeling gt, pred;
    gt.cls = {{1, 1}, {1, 1}};
    gt.track = {{1, 1}, {1, 1}};
    pred.cls = gt.cls;
    pred.track = {{5, 5}, {6, 6}};
    const auto r = evaluate(pred, gt, c);
    EXPECT_EQ(r.per_class[1].tp, 2);
    EXPECT_EQ(r.per_class[1].ids, 1);
    EXPECT_DOUBLE_EQ(r.per_class[1].pq, 1.0);
    EXPECT_DOUBLE_EQ(r.per_class[1].ptq, 0.5);
    EXPECT_DOUBLE_EQ(r.per_class[1].sptq, 0.5);
}

TEST(TrackingQuality, NoSwitchMeansPtqEqualsPq) {
    p4d::util::Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        auto in = random_instance(rng);
        // Same ids as ground truth: matched instances never switch.
        in.pred.track = in.gt.track;
        const auto r = evaluate(in.pred, in.gt, four_classes());
        for (const auto& cm : r.per_class) {
            EXPECT_EQ(cm.ids, 0);
            EXPECT_DOUBLE_EQ(cm.ptq, cm.pq);
        }
    }
}

TEST(TrackingQuality, PtqIsClampedAtZero) {
    MetricConfig c;
    c.thing = {false, true};
    PanopticLabeling gt, pred;
    for (std::uint32_t f = 0; f < 3; ++f) {
        // IoU 0.6 every frame with a new id each time.
        gt.cls.push_back({1, 1, 1, 0, 0});
        gt.track.push_back({1, 1, 1, 0, 0});
        pred.cls.push_back({1, 1, 1, 1, 1});
        pred.track.push_back({f + 1, f + 1, f + 1, f + 1, f + 1});
    }
    const auto r = evaluate(pred, gt, c);
    EXPECT_EQ(r.per_class[1].ids, 2);
    EXPECT_EQ(r.per_class[1].ptq, 0.0);
    EXPECT_GT(r.per_class[1].sptq, 0.0);
}

TEST(Association, HalfCoveredTrackScoresQuarter) {
    MetricConfig c;
    c.thing = {false, true};
    PanopticLabeling gt, pred;
    gt.cls = {std::vector<std::uint16_t>(10, 1), std::vector<std::uint16_t>(10, 1)};
    gt.track = {std::vector<std::uint32_t>(10, 1), std::vector<std::uint32_t>(10, 1)};
    pred.cls = gt.cls;
    pred.track = {std::vector<std::uint32_t>(10, 3), std::vector<std::uint32_t>(10, 0)};
    const auto r = evaluate(pred, gt, c);
    EXPECT_DOUBLE_EQ(r.s_assoc, 0.25);
}

TEST(Association, LstqIsZeroWhenEitherFactorIs) {
    MetricConfig c;
    c.thing = {false, true};
    const auto gt = single_frame({1, 1, 0}, {2, 2, 0});
    const auto pred = single_frame({1, 1, 0}, {0, 0, 0});
    const auto r = evaluate(pred, gt, c);
    EXPECT_GT(r.s_cls, 0.0);
    EXPECT_EQ(r.s_assoc, 0.0);
    EXPECT_EQ(r.lstq, 0.0);
}

TEST(PanopticTracking, HarmonicMeanCases) {
    EXPECT_DOUBLE_EQ(harmonic_mean(0.7, 0.7), 0.7);
    EXPECT_EQ(harmonic_mean(0.9, 0.0), 0.0);
    EXPECT_EQ(harmonic_mean(0.0, 0.0), 0.0);
    EXPECT_NEAR(harmonic_mean(0.8, 0.6), 0.96 / 1.4, 1e-15);
}

TEST(Evaluation, MisalignedInputsAreRejected) {
    MetricConfig c;
    c.thing = {false, true};
    const auto a = single_frame({0, 1}, {0, 1});
    const auto b = single_frame({0}, {0});
    EXPECT_THROW(evaluate(a, b, c), MisalignedInput);
    PanopticLabeling two = a;
    two.cls.push_back({0, 0});
    two.track.push_back({0, 0});
    EXPECT_THROW(evaluate(two, a, c), MisalignedInput);
}

TEST(Evaluation, IgnoredPointsDoNotCount) {
    MetricConfig c;
    c.thing = {false, true, false};
    c.ignore_class = 2;
    const auto gt = single_frame({1, 1, 2, 2}, {1, 1, 0, 0});
    const auto pred = single_frame({1, 1, 1, 1}, {4, 4, 4, 4});
    const auto r = evaluate(pred, gt, c);
    EXPECT_EQ(r.pq, 1.0);
    EXPECT_EQ(r.s_assoc, 1.0);
    EXPECT_EQ(max_discrepancy(r, oracle_evaluate(pred, gt, c)), 0.0);
}

TEST(Evaluation, ReportSerialisesEveryFamily) {
    MetricConfig c;
    c.thing = {false, true};
    const auto l = single_frame({0, 1}, {0, 1});
    const auto j = evaluate(l, l, c).to_json({"road", "car"});
    for (const char* k : {"miou", "pq", "sq", "rq", "pq_dagger", "ptq", "sptq", "s_assoc", "s_cls", "lstq", "tq", "pat"})
        EXPECT_EQ(j["mean"][k].get<double>(), 1.0) << k;
    EXPECT_EQ(j["classes"][1]["name"], "car");
}
