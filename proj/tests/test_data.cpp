#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"
#include "uga/color.hpp"
#include "uga/png_io.hpp"
#include "uga/rng.hpp"
#include "uga/synthdata.hpp"

namespace uga {
namespace {

Image random_image(int h, int w, std::uint64_t seed) {
    Image img(h, w, 3);
    Rng rng(seed);
    for (auto& v : img.data) v = static_cast<float>(rng.below(256)) / 255.0f;
    return img;
}

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) {
        const auto va = a.next();
        EXPECT_EQ(va, b.next());
        EXPECT_NE(va, c.next());
    }
}

TEST(Rng, DerivedSeedsDependOnPath) {
    EXPECT_EQ(derive_seed(7, {1, 2}), derive_seed(7, {1, 2}));
    EXPECT_NE(derive_seed(7, {1, 2}), derive_seed(7, {2, 1}));
    EXPECT_NE(derive_seed(7, {1}), derive_seed(8, {1}));
}

TEST(Rng, ShuffleIsAPermutation) {
    std::vector<int> v(50);
    for (int i = 0; i < 50; ++i) v[i] = i;
    Rng rng(3);
    rng.shuffle(v);
    std::set<int> seen(v.begin(), v.end());
    EXPECT_EQ(seen.size(), 50u);
    EXPECT_FALSE(std::is_sorted(v.begin(), v.end()));
}

TEST(Rng, UniformAndBelowStayInRange) {
    Rng rng(9);
    for (int i = 0; i < 1000; ++i) {
        const double u = rng.uniform();
        EXPECT_GE(u, 0.0);
        EXPECT_LT(u, 1.0);
        EXPECT_LT(rng.below(7), 7);
    }
}

TEST(Image, CropAndFlip) {
    const Image img = random_image(8, 10, 1);
    const Image c = img.crop({3, 2}, 4, 5);
    EXPECT_EQ(c.at(1, 0, 0), img.at(1, 2, 3));
    EXPECT_EQ(c.at(2, 3, 4), img.at(2, 5, 7));
    EXPECT_THROW(img.crop({7, 0}, 4, 4), DataError);
    const Image h = flip_horizontal(img);
    EXPECT_EQ(h.at(0, 1, 0), img.at(0, 1, 9));
    EXPECT_EQ(flip_horizontal(h), img);
    EXPECT_EQ(flip_vertical(flip_vertical(img)), img);
    Mask m(4, 4);
    m.at(0, 1) = 1;
    EXPECT_EQ(flip_vertical(m).at(3, 1), 1);
    EXPECT_EQ(flip_horizontal(m).at(0, 2), 1);
}

TEST(Color, IdentityStyleReturnsInput) {
    const Image img = random_image(6, 6, 2);
    EXPECT_EQ(apply_center_style(img, CenterStyle{}), img);
}

TEST(Color, HalfTurnTwiceRestoresColors) {
    const Image img = random_image(6, 6, 3);
    const Image back = rotate_hue(rotate_hue(img, 0.5), 0.5);
    for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 1e-5);
}

TEST(Color, GrayPixelsIgnoreHue) {
    Image img(1, 3, 3);
    for (int x = 0; x < 3; ++x)
        for (int c = 0; c < 3; ++c) img.at(c, 0, x) = 0.25f * static_cast<float>(x + 1);
    const Image out = rotate_hue(img, 0.3);
    for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(out.data[i], img.data[i], 1e-6);
}

TEST(Color, StyleCommutesWithCrop) {
    const Image img = random_image(12, 12, 4);
    const CenterStyle style{.hue_shift = 0.1, .saturation_scale = 0.8, .brightness_offset = 0.05};
    const Image a = apply_center_style(img, style).crop({3, 4}, 5, 5);
    const Image b = apply_center_style(img.crop({3, 4}, 5, 5), style);
    EXPECT_EQ(a, b);
}

TEST(Color, StainScalingIdentityIsNoOp) {
    Image img = random_image(5, 5, 5);
    const Image before = img;
    apply_stain_scaling(img, 1.0, 1.0);
    EXPECT_EQ(img, before);
    apply_stain_scaling(img, 0.5, 1.2);
    EXPECT_NE(img, before);
    Image gray(2, 2, 1);
    EXPECT_THROW(apply_stain_scaling(gray, 0.5, 1.0), DataError);
}

TEST(Png, RgbAndMaskRoundTrip) {
    test::TempDir dir;
    const Image img = random_image(9, 7, 6);
    png::write(dir / "a.png", png::from_image(img));
    EXPECT_EQ(png::to_rgb_image(png::read(dir / "a.png")), img);
    Mask m(5, 6);
    m.at(2, 3) = 1;
    m.at(4, 0) = 1;
    const auto bytes = png::encode(png::from_mask(m));
    EXPECT_TRUE(png::has_png_signature(bytes));
    EXPECT_EQ(png::to_mask(png::decode(bytes)), m);
    EXPECT_THROW(png::decode(std::vector<std::uint8_t>{1, 2, 3}), DataError);
}

CohortSpec small_spec(std::uint64_t seed = 7) {
    CohortSpec s;
    s.num_centers = 5;
    s.slides_per_center = 8;
    s.slide_size = 64;
    s.seed = seed;
    s.thresholds = test::tiny_thresholds();
    return s;
}

TEST(Synthdata, CountsCentersAndIds) {
    const auto slides = generate_cohort(small_spec());
    ASSERT_EQ(slides.size(), 40u);
    std::set<int> centers;
    std::set<std::string> ids;
    for (const auto& s : slides) {
        centers.insert(s.center);
        ids.insert(s.id);
        EXPECT_EQ(s.image.height, 64);
        EXPECT_EQ(s.image.channels, 3);
        EXPECT_EQ(s.mask.width, 64);
    }
    EXPECT_EQ(centers.size(), 5u);
    EXPECT_EQ(ids.size(), 40u);
}

TEST(Synthdata, DeterministicAndIndependentOfJobs) {
    const auto a = generate_cohort(small_spec(), 1);
    const auto b = generate_cohort(small_spec(), 3);
    const auto c = generate_cohort(small_spec(8), 1);
    ASSERT_EQ(a.size(), b.size());
    bool any_diff = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].image, b[i].image);
        EXPECT_EQ(a[i].mask, b[i].mask);
        any_diff |= !(a[i].image == c[i].image);
    }
    EXPECT_TRUE(any_diff);
}

TEST(Synthdata, NegativeOnlyMixGivesEmptyMasks) {
    auto spec = small_spec();
    spec.lesion_class_mix = {1.0, 0.0, 0.0, 0.0};
    for (const auto& s : generate_cohort(spec)) {
        EXPECT_TRUE(s.mask.empty());
        EXPECT_EQ(s.lesion_class, LesionClass::negative);
    }
}

TEST(Synthdata, LesionClassThresholds) {
    const LesionThresholds t{.itc_max = 50, .micro_max = 1000};
    Mask m(100, 100);
    EXPECT_EQ(lesion_class_of(m, t), LesionClass::negative);
    for (int x = 0; x < 50; ++x) m.at(0, x) = 1;
    EXPECT_EQ(lesion_class_of(m, t), LesionClass::itc);
    m.at(1, 0) = 1;
    EXPECT_EQ(lesion_class_of(m, t), LesionClass::micro);
    // two separate 40-px components stay ITC: the largest component decides
    Mask two(100, 100);
    for (int x = 0; x < 40; ++x) {
        two.at(10, x) = 1;
        two.at(50, x) = 1;
    }
    EXPECT_EQ(lesion_class_of(two, t), LesionClass::itc);
    Mask big(100, 100, 1);
    EXPECT_EQ(lesion_class_of(big, t), LesionClass::macro);
}

TEST(Synthdata, GeneratedClassesMatchMasks) {
    const auto spec = small_spec(3);
    std::map<LesionClass, int> counts;
    for (const auto& s : generate_cohort(spec)) {
        EXPECT_EQ(lesion_class_of(s.mask, spec.thresholds), s.lesion_class) << s.id;
        ++counts[s.lesion_class];
    }
    for (auto c : kLesionClasses) EXPECT_EQ(counts[c], 10) << to_string(c);
}

TEST(Synthdata, SplitHygiene) {
    const auto spec = small_spec();
    for (const auto& s : generate_cohort(spec))
        if (s.center != spec.train_center) {
            EXPECT_NE(s.split, Split::train) << s.id;
        }
    int test_per_center[5] = {};
    int train = 0;
    for (const auto& s : generate_cohort(spec)) {
        test_per_center[s.center] += s.split == Split::test;
        train += s.split == Split::train;
    }
    for (int c = 0; c < 5; ++c) EXPECT_EQ(test_per_center[c], 2);
    EXPECT_EQ(train, 4); // 6 non-test slides at 0.667
}

TEST(Synthdata, StylesDifferOnlyOffTrainCenter) {
    const auto spec = small_spec();
    const auto base = center_style(spec, spec.train_center);
    EXPECT_TRUE(base.stain_identity());
    EXPECT_TRUE(base.hsv_identity());
    for (int c = 1; c < 5; ++c) {
        const auto st = center_style(spec, c);
        EXPECT_LT(st.hematoxylin_scale, 1.0);
        EXPECT_FALSE(st.hsv_identity());
    }
}

TEST(Synthdata, MixMustSumToOne) {
    auto spec = small_spec();
    spec.lesion_class_mix = {0.5, 0.5, 0.5, 0.0};
    try {
        generate_cohort(spec);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("cohort.lesion_class_mix"), std::string::npos);
    }
}

TEST(Synthdata, IngestRejectsDimensionMismatch) {
    test::TempDir dir;
    png::write(dir / "img.png", png::from_image(random_image(8, 8, 1)));
    png::write(dir / "mask.png", png::from_mask(Mask(8, 9)));
    try {
        ingest_pair(dir / "img.png", dir / "mask.png", 0);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("dimension mismatch"), std::string::npos);
    }
}

TEST(Synthdata, WriteLoadRoundTrip) {
    test::TempDir dir;
    const auto spec = small_spec();
    const auto slides = generate_cohort(spec);
    write_cohort(dir.path(), slides, &spec);
    const auto back = load_cohort(dir.path());
    ASSERT_EQ(back.size(), slides.size());
    for (std::size_t i = 0; i < slides.size(); ++i) {
        EXPECT_EQ(back[i].id, slides[i].id);
        EXPECT_EQ(back[i].image, slides[i].image);
        EXPECT_EQ(back[i].mask, slides[i].mask);
        EXPECT_EQ(back[i].split, slides[i].split);
        EXPECT_EQ(back[i].lesion_class, slides[i].lesion_class);
    }
    const json manifest = read_json_file(dir / "manifest.json");
    EXPECT_EQ(cohort_spec_from_json(manifest.at("spec")).seed, spec.seed);
}

TEST(Synthdata, UnknownConfigKeyIsNamed) {
    try {
        cohort_spec_from_json(json{{"slide_sise", 64}});
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("slide_sise"), std::string::npos);
    }
}

} // namespace
} // namespace uga
