#include "zal3d/pseudo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "zal3d/parallel.hpp"
#include "zal3d/rng.hpp"

namespace zal3d {

std::string to_string(PseudoKind kind) {
    switch (kind) {
        case PseudoKind::none: return "none";
        case PseudoKind::adding: return "adding";
        case PseudoKind::removing: return "removing";
    }
    return "?";
}

void SynthesisConfig::validate() const {
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in (0, 1]");
    if (!(removal_min > 0.0 && removal_min <= removal_max && removal_max < 1.0))
        throw ConfigError("removal ratio range must satisfy 0 < min <= max < 1");
    if (!(adding_share >= 0.0 && adding_share <= 1.0)) throw ConfigError("adding_share must lie in [0, 1]");
    if (negatives_per_positive == 0) throw ConfigError("negatives_per_positive must be positive");
    if (patch_points == 0) throw ConfigError("patch_points must be positive");
}

std::vector<Point> extract_interest_points(const OrderedPointMap& map, const GroundTruthMask& mask) {
    if (mask.height() != map.height() || mask.width() != map.width())
        throw ArgumentError("interest mask and map dimensions differ");
    std::vector<Point> out;
    for (std::size_t i = 0; i < map.size(); ++i)
        if (mask[i] && !is_sentinel(map[i])) out.push_back(map[i]);
    if (out.empty()) throw SynthesisError("interest mask selects only sentinel pixels");
    return out;
}

NormalSurface::NormalSurface(const OrderedPointMap& map) : pixels_(map.foreground_indices()) {
    if (pixels_.empty()) return;
    std::vector<Vec3> pts;
    pts.reserve(pixels_.size());
    for (auto px : pixels_) pts.push_back(to_vec3(map[px]));
    tree_.emplace(std::move(pts));
}

namespace {

Point to_point(const Vec3& v) {
    return Point{static_cast<float>(v.x()), static_cast<float>(v.y()), static_cast<float>(v.z())};
}

}  // namespace

PseudoPatch make_adding_patch(const NormalSurface& surface, std::span<const Point> interest_points,
                              const SynthesisConfig& cfg, std::uint64_t seed) {
    const std::size_t n = cfg.patch_points;
    if (surface.size() < n) throw ArgumentError("adding patch: normal map needs at least " + std::to_string(n) + " foreground points");
    if (interest_points.empty()) throw ArgumentError("adding patch: no interest points");

    Vec3 interest_centroid = Vec3::Zero();
    for (const auto& p : interest_points) interest_centroid += to_vec3(p);
    interest_centroid /= static_cast<double>(interest_points.size());

    Rng rng = make_rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, surface.size() - 1);
    const KdTree& tree = surface.tree();

    for (std::size_t attempt = 0; attempt <= cfg.max_site_retries; ++attempt) {
        const std::size_t site = pick(rng);
        const Vec3 site_xyz = tree.point(site);
        // translate only: the interest cluster's centroid lands on the site
        std::vector<Vec3> attached;
        attached.reserve(interest_points.size());
        for (const auto& p : interest_points) attached.push_back(to_vec3(p) - interest_centroid + site_xyz);

        Vec3 anchor = Vec3::Zero();
        for (const auto& a : attached) anchor += a;
        std::size_t anchor_count = attached.size();
        if (cfg.surrounding > 0) {
            for (const auto& nb : tree.knn(site_xyz, std::min(cfg.surrounding, tree.size()))) {
                anchor += tree.point(nb.index);
                ++anchor_count;
            }
        }
        anchor /= static_cast<double>(anchor_count);

        // k-NN over the union: surface indices [0, size), attached indices after
        struct Candidate {
            double d2;
            std::size_t index;
        };
        std::vector<Candidate> cand;
        cand.reserve(n + attached.size());
        for (const auto& nb : tree.knn(anchor, n)) cand.push_back({squared_distance(tree.point(nb.index), anchor), nb.index});
        for (std::size_t i = 0; i < attached.size(); ++i)
            cand.push_back({squared_distance(attached[i], anchor), surface.size() + i});
        std::sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) {
            return a.d2 < b.d2 || (a.d2 == b.d2 && a.index < b.index);
        });
        cand.resize(n);

        std::size_t from_surface = 0;
        PseudoPatch patch;
        patch.points.reserve(n);
        for (const auto& c : cand) {
            if (c.index < surface.size()) {
                ++from_surface;
                patch.points.push_back(to_point(tree.point(c.index)));
            } else {
                patch.points.push_back(to_point(attached[c.index - surface.size()]));
            }
        }
        if (from_surface == 0 || from_surface == n) continue;
        patch.label = 1;
        patch.kind = PseudoKind::adding;
        patch.provenance.anchor_pixel = surface.pixel(site);
        patch.provenance.seed = seed;
        return patch;
    }
    throw SynthesisError("adding patch: no site produced a patch mixing surface and attached points");
}

PseudoPatch make_adding_patch(const OrderedPointMap& normal_map, std::span<const Point> interest_points,
                              const SynthesisConfig& cfg, std::uint64_t seed) {
    return make_adding_patch(NormalSurface(normal_map), interest_points, cfg, seed);
}

PseudoPatch make_removing_patch(const NormalSurface& surface, const SynthesisConfig& cfg, std::uint64_t seed,
                                std::optional<double> forced_ratio) {
    const std::size_t n = cfg.patch_points;
    if (surface.size() < n) throw ArgumentError("removing patch: normal map needs at least " + std::to_string(n) + " foreground points");
    Rng rng = make_rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, surface.size() - 1);
    const std::size_t anchor = pick(rng);
    const auto nbrs = surface.tree().knn(surface.tree().point(anchor), n);

    double ratio;
    if (forced_ratio) {
        ratio = *forced_ratio;
    } else {
        std::uniform_real_distribution<double> u(cfg.removal_min, cfg.removal_max);
        ratio = u(rng);
    }
    const auto removed = std::min<std::size_t>(n - 1, static_cast<std::size_t>(std::lround(std::clamp(ratio, 0.0, 1.0) * static_cast<double>(n))));

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> survivors(order.begin() + static_cast<long>(removed), order.end());
    std::sort(survivors.begin(), survivors.end());

    PseudoPatch patch;
    patch.points.reserve(n);
    for (auto s : survivors) patch.points.push_back(to_point(surface.tree().point(nbrs[s].index)));
    std::uniform_int_distribution<std::size_t> resample(0, survivors.size() - 1);
    while (patch.points.size() < n) patch.points.push_back(patch.points[resample(rng)]);
    patch.label = 1;
    patch.kind = PseudoKind::removing;
    patch.provenance.anchor_pixel = surface.pixel(anchor);
    patch.provenance.seed = seed;
    return patch;
}

PseudoPatch make_removing_patch(const OrderedPointMap& normal_map, const SynthesisConfig& cfg, std::uint64_t seed,
                                std::optional<double> forced_ratio) {
    return make_removing_patch(NormalSurface(normal_map), cfg, seed, forced_ratio);
}

TrainingSet build_training_set(std::span<const LabeledMap> normal_maps, std::span<const LabeledMap> task_irrelevant,
                               const std::string& test_class, const RandNetParams& randnet, std::size_t patch_size,
                               const SynthesisConfig& cfg) {
    cfg.validate();
    if (normal_maps.empty()) throw ConfigError("no normal training maps");
    if (task_irrelevant.empty()) throw ConfigError("task-irrelevant pool is empty");
    for (const auto& m : task_irrelevant)
        if (m.class_label == test_class)
            throw ConfigError("task-irrelevant class '" + m.class_label + "' equals the test class");
    for (const auto& m : normal_maps)
        if (m.class_label == test_class)
            throw ConfigError("training class '" + m.class_label + "' equals the test class");

    // Interest points depend only on the task-irrelevant map, so compute them once.
    std::vector<std::vector<Point>> interest(task_irrelevant.size());
    parallel_for(task_irrelevant.size(), [&](std::size_t i) {
        const auto& map = task_irrelevant[i].map;
        const InterestMask mask = attention_mask(randnet, map, cfg.tau, cfg.randnet);
        try {
            interest[i] = extract_interest_points(map, mask.mask);
        } catch (const SynthesisError&) {
            interest[i].clear();  // unusable sample; others are retried below
        }
    });
    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < interest.size(); ++i)
        if (!interest[i].empty()) usable.push_back(i);
    if (usable.empty()) throw SynthesisError("no task-irrelevant map yields interest points");

    // Admit positives.
    TrainingSet set;
    set.negatives_per_positive = cfg.negatives_per_positive;
    const std::size_t per_patch = patch_size * patch_size;
    std::vector<std::unique_ptr<NormalSurface>> surfaces(normal_maps.size());
    parallel_for(normal_maps.size(), [&](std::size_t m) { surfaces[m] = std::make_unique<NormalSurface>(normal_maps[m].map); });

    for (std::size_t m = 0; m < normal_maps.size(); ++m) {
        const PatchGrid grid = partition(normal_maps[m].map, patch_size);
        std::vector<std::size_t> admitted;
        for (std::size_t p = 0; p < grid.patches.size(); ++p) {
            const auto& pts = grid.patches[p].points;
            const auto fg = static_cast<std::size_t>(std::count_if(pts.begin(), pts.end(), [](const Point& q) { return !is_sentinel(q); }));
            if (static_cast<double>(fg) >= cfg.min_positive_foreground * static_cast<double>(per_patch)) admitted.push_back(p);
        }
        if (surfaces[m]->size() < cfg.patch_points) admitted.clear();
        if (cfg.max_positives_per_map > 0 && admitted.size() > cfg.max_positives_per_map) {
            Rng rng = make_rng(derive_seed(cfg.seed, 0x5e1ec7 + m));
            std::shuffle(admitted.begin(), admitted.end(), rng);
            admitted.resize(cfg.max_positives_per_map);
            std::sort(admitted.begin(), admitted.end());
        }
        for (auto p : admitted) {
            PseudoPatch pos;
            pos.points = grid.patches[p].points;
            pos.provenance.normal_sample = m;
            pos.provenance.patch_index = p;
            pos.provenance.anchor_pixel = patch_pixel_indices(grid.layout, normal_maps[m].map.width(), p).front();
            set.positives.push_back(std::move(pos));
        }
    }
    if (set.positives.empty()) throw SynthesisError("no training patch has enough foreground to serve as a positive");

    const std::size_t k = cfg.negatives_per_positive;
    const auto adding = static_cast<std::size_t>(std::lround(cfg.adding_share * static_cast<double>(k)));
    set.negatives.resize(set.positives.size() * k);
    parallel_for(set.positives.size(), [&](std::size_t i) {
        const std::uint64_t pos_seed = derive_seed(cfg.seed, i);
        const std::size_t m = set.positives[i].provenance.normal_sample;
        const NormalSurface& surface = *surfaces[m];
        for (std::size_t j = 0; j < k; ++j) {
            std::uint64_t s = derive_seed(pos_seed, j);
            PseudoPatch neg;
            if (j < adding) {
                for (std::size_t attempt = 0;; ++attempt) {
                    Rng rng = make_rng(s);
                    const std::size_t src = usable[std::uniform_int_distribution<std::size_t>(0, usable.size() - 1)(rng)];
                    try {
                        neg = make_adding_patch(surface, interest[src], cfg, derive_seed(s, 1));
                        neg.provenance.irrelevant_sample = src;
                        break;
                    } catch (const SynthesisError&) {
                        // some interest clusters never mix with a surface; draw other sources
                        if (attempt >= 4 + usable.size()) throw;
                        s = derive_seed(s, 2);
                    }
                }
            } else {
                neg = make_removing_patch(surface, cfg, s);
            }
            neg.provenance.normal_sample = m;
            set.negatives[i * k + j] = std::move(neg);
        }
    });
    return set;
}

}  // namespace zal3d
