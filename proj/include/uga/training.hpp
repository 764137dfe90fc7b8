#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "uga/error.hpp"
#include "uga/json_util.hpp"
#include "uga/network.hpp"
#include "uga/parallel.hpp"
#include "uga/rng.hpp"
#include "uga/synthdata.hpp"

namespace uga {

struct TrainConfig {
    int patch_size = 64;
    int batch_size = 2;
    double tumor_fraction = 0.2; ///< tumor-containing : benign = 1 : 4
    int steps = 1000;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::uint64_t seed = 1;
    int folds = 5;
    int max_category_attempts = 100;
    bool allow_benign_only = true;

    void validate() const {
        auto fail = [](const std::string& key, const std::string& msg) {
            throw ConfigError("train." + key + ": " + msg);
        };
        if (patch_size < 4) fail("patch_size", "must be >= 4");
        if (batch_size < 1) fail("batch_size", "must be >= 1");
        if (steps < 0) fail("steps", "must be >= 0");
        if (!(learning_rate > 0.0)) fail("learning_rate", "must be > 0");
        if (!(tumor_fraction >= 0.0 && tumor_fraction <= 1.0)) fail("tumor_fraction", "must be in [0, 1]");
        if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1", "must be in [0, 1)");
        if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2", "must be in [0, 1)");
        if (folds < 2) fail("folds", "must be >= 2");
        if (max_category_attempts < 1) fail("max_category_attempts", "must be >= 1");
    }
};

inline json to_json(const TrainConfig& c) {
    return json{{"patch_size", c.patch_size},
                {"batch_size", c.batch_size},
                {"tumor_fraction", c.tumor_fraction},
                {"steps", c.steps},
                {"learning_rate", c.learning_rate},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"adam_epsilon", c.adam_epsilon},
                {"seed", c.seed},
                {"folds", c.folds},
                {"max_category_attempts", c.max_category_attempts},
                {"allow_benign_only", c.allow_benign_only}};
}

inline TrainConfig train_config_from_json(const json& j, const std::string& path = "train") {
    TrainConfig c;
    SectionReader r(j, path);
    r.get("patch_size", c.patch_size)
        .get("batch_size", c.batch_size)
        .get("tumor_fraction", c.tumor_fraction)
        .get("steps", c.steps)
        .get("learning_rate", c.learning_rate)
        .get("beta1", c.beta1)
        .get("beta2", c.beta2)
        .get("adam_epsilon", c.adam_epsilon)
        .get("seed", c.seed)
        .get("folds", c.folds)
        .get("max_category_attempts", c.max_category_attempts)
        .get("allow_benign_only", c.allow_benign_only)
        .finish();
    return c;
}

// ---- patch sampling ----

/// Raw (un-normalized) training patch with its target.
struct RawSample {
    Image patch;
    Mask mask;
    bool tumor = false; ///< drawn as a tumor-containing patch
};

struct SamplingWarnings {
    std::size_t tumor_fallbacks = 0;  ///< tumor draw requested but unobtainable
    std::size_t benign_fallbacks = 0; ///< benign draw requested but unobtainable

    std::size_t total() const { return tumor_fallbacks + benign_fallbacks; }
};

/// Draws tumor-containing / benign patches from a fixed slide set. Holds
/// per-slide foreground pixel lists and mask integral images.
class PatchSampler {
public:
    PatchSampler(std::vector<const Slide*> slides, int patch_size) : slides_(std::move(slides)), patch_(patch_size) {
        if (slides_.empty()) throw DataError("patch sampler needs at least one slide");
        for (const Slide* s : slides_) {
            if (s->image.height < patch_ || s->image.width < patch_) throw DataError("patch larger than slide " + s->id);
            std::vector<Point> fg;
            Integral integral(s->mask);
            for (int y = 0; y < s->mask.height; ++y)
                for (int x = 0; x < s->mask.width; ++x)
                    if (s->mask.at(y, x)) fg.push_back({x, y});
            if (!fg.empty()) tumor_slides_.push_back(foreground_.size());
            foreground_.push_back(std::move(fg));
            integrals_.push_back(std::move(integral));
        }
    }

    bool has_tumor() const { return !tumor_slides_.empty(); }
    int patch_size() const { return patch_; }

    RawSample draw(const TrainConfig& config, Rng& rng, SamplingWarnings& warnings) const {
        const bool want_tumor = rng.bernoulli(config.tumor_fraction);
        if (want_tumor) {
            if (has_tumor()) return draw_tumor(rng);
            ++warnings.tumor_fallbacks;
            if (!config.allow_benign_only) throw DataError("no tumor pixels available and benign-only sampling is disabled");
            if (auto s = try_benign(config.max_category_attempts, rng)) return std::move(*s);
            throw DataError("neither tumor nor benign patches obtainable");
        }
        if (auto s = try_benign(config.max_category_attempts, rng)) return std::move(*s);
        ++warnings.benign_fallbacks;
        if (!has_tumor()) throw DataError("neither tumor nor benign patches obtainable");
        return draw_tumor(rng);
    }

private:
    struct Integral {
        int w = 0;
        std::vector<std::uint32_t> sum; ///< (h+1) x (w+1)
        explicit Integral(const Mask& m) : w(m.width), sum(static_cast<std::size_t>(m.height + 1) * (m.width + 1), 0) {
            for (int y = 0; y < m.height; ++y)
                for (int x = 0; x < m.width; ++x)
                    at(y + 1, x + 1) = at(y, x + 1) + at(y + 1, x) - at(y, x) + (m.at(y, x) ? 1u : 0u);
        }
        std::uint32_t& at(int y, int x) { return sum[static_cast<std::size_t>(y) * (w + 1) + x]; }
        std::uint32_t at(int y, int x) const { return sum[static_cast<std::size_t>(y) * (w + 1) + x]; }
        std::uint32_t box(Point o, int p) const {
            return at(o.y + p, o.x + p) - at(o.y, o.x + p) - at(o.y + p, o.x) + at(o.y, o.x);
        }
    };

    RawSample extract(std::size_t slide, Point origin, bool tumor) const {
        const Slide& s = *slides_[slide];
        return {s.image.crop(origin, patch_, patch_), s.mask.crop(origin, patch_, patch_), tumor};
    }

    RawSample draw_tumor(Rng& rng) const {
        const std::size_t slide = tumor_slides_[static_cast<std::size_t>(rng.below(static_cast<int>(tumor_slides_.size())))];
        const auto& fg = foreground_[slide];
        const Point p = fg[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(fg.size())))];
        const int jitter = patch_ / 4;
        const int jx = jitter > 0 ? rng.below(2 * jitter + 1) - jitter : 0;
        const int jy = jitter > 0 ? rng.below(2 * jitter + 1) - jitter : 0;
        const Slide& s = *slides_[slide];
        const Point origin{std::clamp(p.x - patch_ / 2 + jx, 0, s.image.width - patch_),
                           std::clamp(p.y - patch_ / 2 + jy, 0, s.image.height - patch_)};
        return extract(slide, origin, true);
    }

    std::optional<RawSample> try_benign(int attempts, Rng& rng) const {
        for (int a = 0; a < attempts; ++a) {
            const std::size_t slide = static_cast<std::size_t>(rng.below(static_cast<int>(slides_.size())));
            const Slide& s = *slides_[slide];
            const Point origin{rng.below(s.image.width - patch_ + 1), rng.below(s.image.height - patch_ + 1)};
            if (integrals_[slide].box(origin, patch_) == 0) return extract(slide, origin, false);
        }
        return std::nullopt;
    }

    std::vector<const Slide*> slides_;
    int patch_;
    std::vector<std::vector<Point>> foreground_;
    std::vector<std::size_t> tumor_slides_;
    std::vector<Integral> integrals_;
};

struct RawBatch {
    std::vector<RawSample> samples;
    SamplingWarnings warnings;
};

/// One batch of config.batch_size raw patches, tumor-containing with
/// probability config.tumor_fraction.
inline RawBatch sample_training_batch(std::span<const Slide> slides, const TrainConfig& config, Rng& rng) {
    std::vector<const Slide*> ptrs;
    for (const auto& s : slides) ptrs.push_back(&s);
    PatchSampler sampler(std::move(ptrs), config.patch_size);
    RawBatch batch;
    for (int b = 0; b < config.batch_size; ++b) batch.samples.push_back(sampler.draw(config, rng, batch.warnings));
    return batch;
}

// ---- optimizer ----

class Adam {
public:
    Adam(double lr, double beta1, double beta2, double eps)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(kParameterCount, 0.0), v_(kParameterCount, 0.0) {}

    explicit Adam(const TrainConfig& c) : Adam(c.learning_rate, c.beta1, c.beta2, c.adam_epsilon) {}

    void step(ModelParams& params, const BasicParams<float>& grad) {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, t_);
        const double c2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < kParameterCount; ++i) {
            const double g = grad.values[i];
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
            const double mhat = m_[i] / c1;
            const double vhat = v_[i] / c2;
            params.values[i] = static_cast<float>(params.values[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    std::vector<double> m_, v_;
    int t_ = 0;
};

// ---- ensemble ----

struct EnsembleModel {
    std::vector<ModelParams> folds;
    TrainConfig train_config;
    int round = 0;
    std::string parent_id; ///< empty for a baseline

    std::size_t k() const { return folds.size(); }

    /// Content hash of the fold parameters (FNV-1a 64, hex).
    std::string id() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& f : folds)
            for (float v : f.values) {
                const auto bits = std::bit_cast<std::uint32_t>(v);
                for (int b = 0; b < 4; ++b) {
                    h ^= (bits >> (8 * b)) & 0xffu;
                    h *= 0x100000001b3ULL;
                }
            }
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
        return buf;
    }
};

/// Shuffled round-robin assignment of n items to k folds; result[i] is the
/// fold of item i.
inline std::vector<int> kfold_partition(std::size_t n, int k, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, {0xf01d}));
    rng.shuffle(order);
    std::vector<int> fold(n);
    for (std::size_t pos = 0; pos < n; ++pos) fold[order[pos]] = static_cast<int>(pos % static_cast<std::size_t>(k));
    return fold;
}

struct FoldTrace {
    double initial_loss = 0.0; ///< on a fixed monitor batch, before training
    double final_loss = 0.0;   ///< same batch, after training
    SamplingWarnings warnings;
};

struct TrainingResult {
    EnsembleModel model;
    std::vector<FoldTrace> traces;
};

/// A corrected patch ready for training (un-normalized pixels).
struct LabeledPatch {
    Image patch;
    Mask mask;
};

/// Indexed patches produced on demand, so large augmented sets need not be
/// held in memory. `get` must be thread-safe and deterministic in its index.
struct PatchSource {
    std::size_t size = 0;
    std::function<LabeledPatch(std::size_t)> get;
};

namespace detail {

inline TrainingSample normalize_sample(const Image& patch, const Mask& mask) { return {zscore_normalize(patch), mask}; }

inline std::vector<TrainingSample> monitor_batch(const PatchSampler& sampler, const TrainConfig& config,
                                                 std::uint64_t seed) {
    Rng rng(seed);
    SamplingWarnings ignored;
    std::vector<TrainingSample> out;
    for (int i = 0; i < 8; ++i) {
        auto s = sampler.draw(config, rng, ignored);
        out.push_back(normalize_sample(s.patch, s.mask));
    }
    return out;
}

/// Optimizes `params` in place. With `extra` non-empty, each batch entry is
/// drawn from it with probability `extra_mix`, otherwise from the sampler.
inline FoldTrace optimize(ModelParams& params, const PatchSampler& sampler, const PatchSource* extra,
                          double extra_mix, const TrainConfig& config, std::uint64_t stream) {
    FoldTrace trace;
    Workspace<float> ws;
    const auto monitor = monitor_batch(sampler, config, derive_seed(stream, {2}));
    trace.initial_loss = batch_loss(params, std::span<const TrainingSample>(monitor), ws);
    Adam adam(config);
    Rng rng(derive_seed(stream, {1}));
    std::vector<TrainingSample> batch(static_cast<std::size_t>(config.batch_size));
    for (int step = 0; step < config.steps; ++step) {
        for (auto& slot : batch) {
            if (extra && extra->size > 0 && rng.bernoulli(extra_mix)) {
                const auto p = extra->get(static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(extra->size))));
                slot = normalize_sample(p.patch, p.mask);
            } else {
                auto s = sampler.draw(config, rng, trace.warnings);
                slot = normalize_sample(s.patch, s.mask);
            }
        }
        const auto g = gradient(params, std::span<const TrainingSample>(batch), ws);
        adam.step(params, g.grad);
    }
    trace.final_loss = batch_loss(params, std::span<const TrainingSample>(monitor), ws);
    return trace;
}

inline std::vector<const Slide*> fold_training_set(std::span<const Slide> slides, const std::vector<int>& partition,
                                                   int fold) {
    std::vector<const Slide*> out;
    for (std::size_t i = 0; i < slides.size(); ++i)
        if (partition[i] != fold) out.push_back(&slides[i]);
    return out;
}

} // namespace detail

/// K-fold ensemble: fold model i is trained on every slide outside fold i.
/// Each fold uses its own RNG stream derived from (seed, fold), so the result
/// does not depend on `jobs`.
inline TrainingResult train_kfold(std::span<const Slide> train_slides, const TrainConfig& config, int jobs = 1) {
    config.validate();
    const int k = config.folds;
    if (train_slides.size() < static_cast<std::size_t>(k))
        throw DataError("train_kfold needs at least " + std::to_string(k) + " slides, got " +
                        std::to_string(train_slides.size()));
    const auto partition = kfold_partition(train_slides.size(), k, config.seed);
    TrainingResult result;
    result.model.train_config = config;
    result.model.folds.resize(static_cast<std::size_t>(k));
    result.traces.resize(static_cast<std::size_t>(k));
    parallel_for(static_cast<std::size_t>(k), jobs, [&](std::size_t f) {
        const int fold = static_cast<int>(f);
        PatchSampler sampler(detail::fold_training_set(train_slides, partition, fold), config.patch_size);
        const std::uint64_t stream = derive_seed(config.seed, {static_cast<std::uint64_t>(fold)});
        ModelParams params = init_params(derive_seed(stream, {0}));
        result.traces[f] = detail::optimize(params, sampler, nullptr, 0.0, config, stream);
        result.model.folds[f] = std::move(params);
    });
    return result;
}


/// Continues every fold from the baseline's weights on a mix of old-data
/// patches (fold-consistent with the baseline partition) and the new
/// patches, which are drawn with probability `new_mix`.
inline TrainingResult continue_training(const EnsembleModel& baseline, std::span<const Slide> old_slides,
                                        const PatchSource& new_patches, const TrainConfig& config,
                                        double new_mix = 0.5, int jobs = 1) {
    config.validate();
    if (new_patches.size == 0) throw DataError("continue_training needs at least one new patch");
    if (baseline.k() < 2) throw DataError("baseline ensemble must have at least 2 folds");
    const LabeledPatch probe = new_patches.get(0);
    if (probe.patch.height != config.patch_size || probe.patch.width != config.patch_size ||
        probe.mask.height != config.patch_size || probe.mask.width != config.patch_size)
        throw DataError("patch-size mismatch: new patch " + std::to_string(probe.patch.width) + "x" +
                        std::to_string(probe.patch.height) + " vs configured " + std::to_string(config.patch_size));
    const int k = static_cast<int>(baseline.k());
    const auto partition = kfold_partition(old_slides.size(), k, baseline.train_config.seed);

    TrainingResult result;
    result.model.train_config = config;
    result.model.round = baseline.round + 1;
    result.model.parent_id = baseline.id();
    result.model.folds = baseline.folds;
    result.traces.resize(static_cast<std::size_t>(k));
    parallel_for(static_cast<std::size_t>(k), jobs, [&](std::size_t f) {
        const int fold = static_cast<int>(f);
        auto subset = detail::fold_training_set(old_slides, partition, fold);
        if (subset.empty())
            for (const auto& s : old_slides) subset.push_back(&s);
        PatchSampler sampler(std::move(subset), config.patch_size);
        const std::uint64_t stream = derive_seed(config.seed, {0xc0de, static_cast<std::uint64_t>(fold)});
        result.traces[f] = detail::optimize(result.model.folds[f], sampler, &new_patches, new_mix, config, stream);
    });
    return result;
}

inline TrainingResult continue_training(const EnsembleModel& baseline, std::span<const Slide> old_slides,
                                        std::span<const LabeledPatch> new_patches, const TrainConfig& config,
                                        double new_mix = 0.5, int jobs = 1) {
    for (const auto& p : new_patches)
        if (p.patch.height != config.patch_size || p.patch.width != config.patch_size ||
            p.mask.height != config.patch_size || p.mask.width != config.patch_size)
            throw DataError("patch-size mismatch: new patch " + std::to_string(p.patch.width) + "x" +
                            std::to_string(p.patch.height) + " vs configured " + std::to_string(config.patch_size));
    PatchSource source{new_patches.size(), [new_patches](std::size_t i) { return new_patches[i]; }};
    return continue_training(baseline, old_slides, source, config, new_mix, jobs);
}

// ---- model file ----
//
// Little-endian: "UGAM", u32 version, u32 K, u64 parameters per fold, then
// K * count f32 values, each fold in layer order (weights [out][in][ky][kx],
// then biases).

inline constexpr std::uint32_t kModelFormatVersion = 1;

namespace detail {

template <class T>
void put_le(std::vector<std::uint8_t>& out, T v) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    const U bits = std::bit_cast<U>(v);
    for (std::size_t b = 0; b < sizeof(T); ++b) out.push_back(static_cast<std::uint8_t>((bits >> (8 * b)) & 0xffu));
}

template <class T>
T get_le(const std::vector<std::uint8_t>& in, std::size_t& pos) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    if (pos + sizeof(T) > in.size()) throw DataError("truncated binary file");
    U bits = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b) bits |= static_cast<U>(in[pos + b]) << (8 * b);
    pos += sizeof(T);
    return std::bit_cast<T>(bits);
}

inline void write_bytes_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw DataError("cannot write file: " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw DataError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

} // namespace detail

inline std::vector<std::uint8_t> encode_model(const EnsembleModel& model) {
    std::vector<std::uint8_t> out{'U', 'G', 'A', 'M'};
    detail::put_le<std::uint32_t>(out, kModelFormatVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.k()));
    detail::put_le<std::uint64_t>(out, kParameterCount);
    for (const auto& f : model.folds)
        for (float v : f.values) detail::put_le<float>(out, v);
    return out;
}

inline std::vector<ModelParams> decode_model(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "UGAM", 4) != 0) throw DataError("not a UGAM model file");
    std::size_t pos = 4;
    const auto version = detail::get_le<std::uint32_t>(bytes, pos);
    if (version != kModelFormatVersion) throw DataError("unsupported model format version " + std::to_string(version));
    const auto k = detail::get_le<std::uint32_t>(bytes, pos);
    const auto count = detail::get_le<std::uint64_t>(bytes, pos);
    if (k < 2) throw DataError("model file declares fewer than 2 folds");
    if (count != kParameterCount) throw DataError("model parameter count mismatch: " + std::to_string(count));
    if (bytes.size() != pos + static_cast<std::size_t>(k) * count * 4) throw DataError("model file size mismatch");
    std::vector<ModelParams> folds(k);
    for (auto& f : folds)
        for (auto& v : f.values) v = detail::get_le<float>(bytes, pos);
    return folds;
}

/// Writes `<dir>/model.ugam` and the provenance sidecar `<dir>/model.json`.
inline void save_model(const std::filesystem::path& dir, const EnsembleModel& model) {
    detail::write_bytes_atomic(dir / "model.ugam", encode_model(model));
    write_json_file(dir / "model.json", json{{"id", model.id()},
                                             {"k", model.k()},
                                             {"round", model.round},
                                             {"parent_id", model.parent_id},
                                             {"train_config", to_json(model.train_config)}});
}

inline EnsembleModel load_model(const std::filesystem::path& dir) {
    if (!std::filesystem::exists(dir / "model.ugam")) throw MissingArtifact((dir / "model.ugam").string());
    EnsembleModel model;
    model.folds = decode_model(png::read_bytes(dir / "model.ugam"));
    const json meta = read_json_file(dir / "model.json");
    if (meta.at("k").get<std::size_t>() != model.k()) throw DataError("fold count in model.json disagrees with model file");
    model.round = meta.at("round").get<int>();
    model.parent_id = meta.at("parent_id").get<std::string>();
    model.train_config = train_config_from_json(meta.at("train_config"));
    return model;
}

} // namespace uga
