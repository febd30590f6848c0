// ============================================================================
// texgen.hpp - synthetic periodic textures, defect injection, CutPaste,
//              patch extraction and dataset handling
// ============================================================================

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "texflow/common.hpp"
#include "texflow/image.hpp"

namespace texflow {

constexpr double kTwoPi = 6.283185307179586477;

// ----------------------------------------------------------------------------
// Texture synthesis
// ----------------------------------------------------------------------------

enum class TextureKind { SineGrid, Checker, Stripes };

inline TextureKind texture_kind_from_string(const std::string& s) {
    if (s == "sine-grid") return TextureKind::SineGrid;
    if (s == "checker") return TextureKind::Checker;
    if (s == "stripes") return TextureKind::Stripes;
    throw ParameterError("unknown texture kind: " + s);
}

inline const char* to_string(TextureKind k) {
    switch (k) {
        case TextureKind::SineGrid: return "sine-grid";
        case TextureKind::Checker: return "checker";
        default: return "stripes";
    }
}

inline Image generate_texture(TextureKind kind, int size, int period,
                              double noise_amplitude, std::uint64_t seed) {
    if (size < 32) throw ParameterError("generate_texture: size must be >= 32");
    if (period < 2 || period > size / 2)
        throw ParameterError("generate_texture: period must be in [2, size/2]");
    if (noise_amplitude < 0.0 || noise_amplitude > 0.2)
        throw ParameterError("generate_texture: noise amplitude must be in [0, 0.2]");

    Image img(size, size, 1);
    for (int i = 0; i < size; ++i) {
        for (int j = 0; j < size; ++j) {
            double v = 0.5;
            switch (kind) {
                case TextureKind::SineGrid:
                    v = 0.5 + 0.25 * (std::sin(kTwoPi * i / period) +
                                      std::sin(kTwoPi * j / period));
                    break;
                case TextureKind::Checker:
                    v = ((i / period + j / period) % 2 == 0) ? 0.25 : 0.75;
                    break;
                case TextureKind::Stripes:
                    v = 0.5 + 0.25 * std::sin(kTwoPi * j / period);
                    break;
            }
            img.at(i, j) = v;
        }
    }
    if (noise_amplitude > 0.0) {
        Rng rng(seed);
        for (auto& v : img.data) v = clamp01(v + rng.uniform(-noise_amplitude, noise_amplitude));
    } else {
        for (auto& v : img.data) v = clamp01(v);
    }
    return img;
}

// ----------------------------------------------------------------------------
// Defect injection
// ----------------------------------------------------------------------------

enum class DefectKind { Hole, Scratch, Blob };

inline DefectKind defect_kind_from_string(const std::string& s) {
    if (s == "hole") return DefectKind::Hole;
    if (s == "scratch") return DefectKind::Scratch;
    if (s == "blob") return DefectKind::Blob;
    throw ParameterError("unknown defect kind: " + s);
}

inline const char* to_string(DefectKind k) {
    switch (k) {
        case DefectKind::Hole: return "hole";
        case DefectKind::Scratch: return "scratch";
        default: return "blob";
    }
}

// Hole and blob fill (a rough ellipse for blob) the given rect; a scratch runs
// along the rect's main diagonal with the given thickness.
struct DefectSpec {
    DefectKind kind = DefectKind::Hole;
    Rect rect;
    int thickness = 1;
    double intensity_delta = -0.5;
};

// Adds intensity_delta inside the defect mask, clamped to [0,1]. Pixels
// outside the returned mask are bit-identical to the input.
inline std::pair<Image, Image> inject_defect(const Image& img, const DefectSpec& spec,
                                             std::uint64_t seed) {
    validate(img);
    if (!spec.rect.inside(img.height, img.width))
        throw ParameterError("inject_defect: geometry outside image bounds");
    if (spec.kind == DefectKind::Scratch && spec.thickness < 1)
        throw ParameterError("inject_defect: scratch thickness must be >= 1");

    Image mask(img.height, img.width, 1, 0.0);
    Rng rng(seed);
    const Rect& r = spec.rect;

    switch (spec.kind) {
        case DefectKind::Hole:
            for (int y = r.y0; y < r.y0 + r.h; ++y)
                for (int x = r.x0; x < r.x0 + r.w; ++x) mask.at(y, x) = 1.0;
            break;
        case DefectKind::Scratch: {
            // Walk the rect diagonal, jittering the center line by one pixel.
            const int steps = std::max(r.w, r.h);
            const double half = (spec.thickness - 1) / 2.0;
            for (int s = 0; s < steps; ++s) {
                const double t = steps == 1 ? 0.0 : double(s) / (steps - 1);
                int cx = r.x0 + int(std::lround(t * (r.w - 1)));
                int cy = r.y0 + int(std::lround(t * (r.h - 1)));
                const int jitter = int(rng.uniform_int(-1, 1));
                if (r.w >= r.h)
                    cy += jitter;
                else
                    cx += jitter;
                const int reach = int(std::ceil(half));
                for (int dy = -reach; dy <= reach; ++dy) {
                    for (int dx = -reach; dx <= reach; ++dx) {
                        if (double(dx) * dx + double(dy) * dy > (half + 0.5) * (half + 0.5))
                            continue;
                        const int px = std::clamp(cx + dx, 0, img.width - 1);
                        const int py = std::clamp(cy + dy, 0, img.height - 1);
                        mask.at(py, px) = 1.0;
                    }
                }
            }
            break;
        }
        case DefectKind::Blob: {
            const double cx = r.x0 + (r.w - 1) / 2.0;
            const double cy = r.y0 + (r.h - 1) / 2.0;
            const double rx = std::max(0.5, r.w / 2.0);
            const double ry = std::max(0.5, r.h / 2.0);
            for (int y = r.y0; y < r.y0 + r.h; ++y) {
                for (int x = r.x0; x < r.x0 + r.w; ++x) {
                    const double nx = (x - cx) / rx;
                    const double ny = (y - cy) / ry;
                    const double edge = 1.0 - 0.25 * rng.uniform();  // ragged boundary
                    if (nx * nx + ny * ny <= edge * edge) mask.at(y, x) = 1.0;
                }
            }
            break;
        }
    }

    Image out = img;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            if (mask.at(y, x) > 0.0)
                for (int c = 0; c < img.channels; ++c)
                    out.at(y, x, c) = clamp01(out.at(y, x, c) + spec.intensity_delta);
    return {std::move(out), std::move(mask)};
}

// ----------------------------------------------------------------------------
// CutPaste: crop a random rectangular patch and paste it at a random location
// ----------------------------------------------------------------------------

struct CutPasteParams {
    double area_lo = 0.02;   // patch area as a fraction of image area
    double area_hi = 0.15;
    double aspect_lo = 0.3;
    double aspect_hi = 3.3;
};

struct CutPasteResult {
    Image image;
    Rect src;
    Rect dst;
};

inline CutPasteResult cutpaste(const Image& img, const CutPasteParams& p, std::uint64_t seed) {
    validate(img);
    if (!(p.area_lo > 0.0 && p.area_lo <= p.area_hi && p.area_hi <= 1.0))
        throw ParameterError("cutpaste: invalid area ratio range");
    if (!(p.aspect_lo > 0.0 && p.aspect_lo <= p.aspect_hi))
        throw ParameterError("cutpaste: invalid aspect range");

    Rng rng(seed);
    int w = 0, h = 0;
    bool found = false;
    for (int attempt = 0; attempt < 100 && !found; ++attempt) {
        const double area = rng.uniform(p.area_lo, p.area_hi) * img.pixel_count();
        const double aspect = rng.uniform(p.aspect_lo, p.aspect_hi);
        w = std::max(1, int(std::lround(std::sqrt(area * aspect))));
        h = std::max(1, int(std::lround(std::sqrt(area / aspect))));
        found = w <= img.width && h <= img.height;
    }
    if (!found)
        throw ParameterError("cutpaste: image too small for the requested patch area");

    const Rect src{int(rng.uniform_int(0, img.width - w)),
                   int(rng.uniform_int(0, img.height - h)), w, h};
    const Rect dst{int(rng.uniform_int(0, img.width - w)),
                   int(rng.uniform_int(0, img.height - h)), w, h};

    Image out = img;
    for (int dy = 0; dy < h; ++dy)
        for (int dx = 0; dx < w; ++dx)
            for (int c = 0; c < img.channels; ++c)
                out.at(dst.y0 + dy, dst.x0 + dx, c) = img.at(src.y0 + dy, src.x0 + dx, c);
    return {std::move(out), src, dst};
}

// ----------------------------------------------------------------------------
// Patch extraction
// ----------------------------------------------------------------------------

inline Image crop(const Image& img, const Rect& r) {
    if (!r.inside(img.height, img.width)) throw ParameterError("crop: rect outside image");
    Image out(r.h, r.w, img.channels);
    for (int y = 0; y < r.h; ++y)
        for (int x = 0; x < r.w; ++x)
            for (int c = 0; c < img.channels; ++c)
                out.at(y, x, c) = img.at(r.y0 + y, r.x0 + x, c);
    return out;
}

inline int patch_grid_count(int extent, int patch, int stride) {
    return (extent - patch) / stride + 1;
}

// Row-major tiling; count = (floor((H-p)/s)+1) * (floor((W-p)/s)+1).
inline std::vector<std::pair<Rect, Image>> extract_patches(const Image& img, int patch,
                                                           int stride) {
    validate(img);
    if (patch < 1 || patch > std::min(img.height, img.width))
        throw ParameterError("extract_patches: patch size larger than image");
    if (stride < 1) throw ParameterError("extract_patches: stride must be >= 1");

    std::vector<std::pair<Rect, Image>> out;
    out.reserve(std::size_t(patch_grid_count(img.height, patch, stride)) *
                patch_grid_count(img.width, patch, stride));
    for (int y = 0; y + patch <= img.height; y += stride)
        for (int x = 0; x + patch <= img.width; x += stride) {
            Rect r{x, y, patch, patch};
            out.emplace_back(r, crop(img, r));
        }
    return out;
}

// ----------------------------------------------------------------------------
// Labeled datasets
// ----------------------------------------------------------------------------

struct DatasetItem {
    std::string id;
    Image image;
    bool anomalous = false;
    std::optional<Image> mask;  // ground truth for anomalous items
};

struct LabeledDataset {
    std::vector<DatasetItem> items;

    void check() const {
        for (const auto& it : items)
            if (it.mask && !(it.mask->height == it.image.height &&
                             it.mask->width == it.image.width))
                throw ParameterError("dataset item " + it.id + ": mask dims != image dims");
    }
};

struct SyntheticDatasetSpec {
    std::vector<TextureKind> textures{TextureKind::SineGrid, TextureKind::Checker};
    int image_size = 64;
    int period = 8;
    double noise_amplitude = 0.02;
    int train_count = 20;
    int test_normal_count = 40;
    int test_anomalous_count = 40;
    double defect_delta_lo = 0.25;
    double defect_delta_hi = 0.6;
};

inline Image synth_texture_for_index(const SyntheticDatasetSpec& spec, int index,
                                     std::uint64_t seed) {
    const TextureKind kind = spec.textures[std::size_t(index) % spec.textures.size()];
    return generate_texture(kind, spec.image_size, spec.period, spec.noise_amplitude, seed);
}

inline DefectSpec random_defect(const SyntheticDatasetSpec& spec, Rng& rng) {
    static const DefectKind kinds[3] = {DefectKind::Hole, DefectKind::Scratch,
                                        DefectKind::Blob};
    DefectSpec d;
    d.kind = kinds[rng.uniform_int(0, 2)];
    const int s = spec.image_size;
    const int w = int(rng.uniform_int(s / 10, s / 4));
    const int h = int(rng.uniform_int(s / 10, s / 4));
    d.rect = Rect{int(rng.uniform_int(1, s - w - 1)), int(rng.uniform_int(1, s - h - 1)), w, h};
    d.thickness = int(rng.uniform_int(1, 3));
    const double mag = rng.uniform(spec.defect_delta_lo, spec.defect_delta_hi);
    d.intensity_delta = rng.uniform() < 0.5 ? -mag : mag;
    return d;
}

inline std::string zero_pad(int n, int width = 4) {
    std::string s = std::to_string(n);
    while (int(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}

// Train split holds normal images only; test split mixes normals with
// defect-injected images carrying ground-truth masks.
inline std::pair<LabeledDataset, LabeledDataset> build_synthetic_dataset(
    const SyntheticDatasetSpec& spec, std::uint64_t seed) {
    LabeledDataset train, test;
    Rng defect_rng(stage_seed(seed, "synth-defects"));

    for (int i = 0; i < spec.train_count; ++i) {
        DatasetItem it;
        it.id = "train/good/" + zero_pad(i);
        it.image = synth_texture_for_index(spec, i, stage_seed(seed, "train-" + std::to_string(i)));
        train.items.push_back(std::move(it));
    }
    for (int i = 0; i < spec.test_normal_count; ++i) {
        DatasetItem it;
        it.id = "test/good/" + zero_pad(i);
        it.image =
            synth_texture_for_index(spec, i, stage_seed(seed, "test-good-" + std::to_string(i)));
        test.items.push_back(std::move(it));
    }
    for (int i = 0; i < spec.test_anomalous_count; ++i) {
        DatasetItem it;
        it.id = "test/defect/" + zero_pad(i);
        Image base =
            synth_texture_for_index(spec, i, stage_seed(seed, "test-bad-" + std::to_string(i)));
        const DefectSpec d = random_defect(spec, defect_rng);
        auto [img, mask] = inject_defect(base, d, stage_seed(seed, "defect-" + std::to_string(i)));
        it.image = std::move(img);
        it.mask = std::move(mask);
        it.anomalous = true;
        test.items.push_back(std::move(it));
    }
    return {std::move(train), std::move(test)};
}

// ----------------------------------------------------------------------------
// On-disk layout (MVTec AD style) and the dataset manifest
// ----------------------------------------------------------------------------

inline bool has_supported_extension(const std::filesystem::path& p) {
    const std::string ext = p.extension().string();
    return ext == ".pgm" || ext == ".ppm";
}

// Reads `<root>/train/good`, `<root>/test/<defect>` and matching
// `<root>/ground_truth/<defect>/<stem>_mask.*`. Returns (train, test).
inline std::pair<LabeledDataset, LabeledDataset> load_mvtec_dir(const std::string& root) {
    namespace fs = std::filesystem;
    const fs::path base(root);
    if (!fs::is_directory(base))
        throw ParameterError("load_mvtec_dir: not a directory: " + root);

    auto sorted_entries = [](const fs::path& dir) {
        std::vector<fs::path> out;
        if (fs::is_directory(dir))
            for (const auto& e : fs::directory_iterator(dir)) out.push_back(e.path());
        std::sort(out.begin(), out.end());
        return out;
    };

    LabeledDataset train;
    for (const auto& p : sorted_entries(base / "train" / "good")) {
        if (!has_supported_extension(p)) continue;
        DatasetItem it;
        it.id = "train/good/" + p.stem().string();
        it.image = load_image(p.string());
        train.items.push_back(std::move(it));
    }

    LabeledDataset test;
    for (const auto& sub : sorted_entries(base / "test")) {
        if (!std::filesystem::is_directory(sub)) continue;
        const std::string defect = sub.filename().string();
        const bool normal = defect == "good";
        for (const auto& p : sorted_entries(sub)) {
            if (!has_supported_extension(p)) continue;
            DatasetItem it;
            it.id = "test/" + defect + "/" + p.stem().string();
            it.image = load_image(p.string());
            it.anomalous = !normal;
            if (!normal) {
                for (const char* ext : {".pgm", ".ppm"}) {
                    const fs::path mask_path =
                        base / "ground_truth" / defect / (p.stem().string() + "_mask" + ext);
                    if (fs::exists(mask_path)) {
                        it.mask = load_image(mask_path.string());
                        break;
                    }
                }
            }
            test.items.push_back(std::move(it));
        }
    }
    if (train.items.empty() && test.items.empty())
        throw ParameterError("load_mvtec_dir: no PGM/PPM images under " + root);
    train.check();
    test.check();
    return {std::move(train), std::move(test)};
}

// Writes images as PGM plus a manifest CSV (path,label,mask-path).
inline void save_dataset(const LabeledDataset& train, const LabeledDataset& test,
                         const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::string manifest = "path,label,mask-path\n";

    auto dump = [&](const LabeledDataset& ds) {
        for (const auto& it : ds.items) {
            const fs::path img_path = fs::path(dir) / (it.id + ".pgm");
            fs::create_directories(img_path.parent_path());
            save_image(it.image, img_path.string());
            std::string mask_rel;
            if (it.mask) {
                // ground_truth mirrors the test tree without its "test/" prefix,
                // matching the MVTec AD layout read back by load_mvtec_dir.
                std::string rel = it.id;
                if (rel.rfind("test/", 0) == 0) rel = rel.substr(5);
                mask_rel = "ground_truth/" + rel + "_mask.pgm";
                const fs::path mask_path = fs::path(dir) / mask_rel;
                fs::create_directories(mask_path.parent_path());
                save_image(*it.mask, mask_path.string());
            }
            manifest += it.id + ".pgm," + (it.anomalous ? "anomalous" : "normal") + "," +
                        mask_rel + "\n";
        }
    };
    dump(train);
    dump(test);

    std::ofstream out(fs::path(dir) / "manifest.csv");
    if (!out) throw ParameterError("cannot write manifest under " + dir);
    out << manifest;
}

}  // namespace texflow
