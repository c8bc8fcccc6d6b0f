#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "defnet/detection.hpp"
#include "defnet/errors.hpp"
#include "defnet/rng.hpp"
#include "defnet/tensor.hpp"

namespace defnet {

// Synthetic deformable-pattern scenes. Every class is a fixed arrangement of
// the same primitive stamps (discs and bars) on a small canvas; instances
// jitter the parts along a class-specific axis. Background texture follows a
// per-scene theme that correlates with the class of the first object.
//
// Class layouts on the base 12x12 canvas (part centers):
//   class 0: discs (3,3) (3,8)  + bottom h-bar,  parts jitter horizontally
//   class 1: discs (3,3) (8,3)  + right  v-bar,  parts jitter vertically
//   class 2: discs (8,3) (8,8)  + top    h-bar,  parts jitter horizontally
//   class 3: discs (3,8) (8,8)  + left   v-bar,  parts jitter vertically
// Classes beyond 4 reuse layout k % 4 with a distinct extra disc.

struct DatasetSpec {
  int classes = 4;
  int train_scenes = 200;
  int val_scenes = 100;
  int image_size = 32;
  double amplitude = 2.0;      // deformation amplitude in pixels
  int min_objects = 1;
  int max_objects = 2;
  int clutter = 4;             // part-like distractor blobs per scene
  double theme_fidelity = 0.85;
  std::uint64_t seed = 1;

  void validate() const {
    if (classes < 2) throw SpecError("need at least two classes");
    if (train_scenes < 1 || val_scenes < 0) throw SpecError("scene counts must be positive");
    if (amplitude < 0.0 || amplitude > 3.0) throw SpecError("amplitude must be in [0, 3]");
    if (min_objects < 0 || max_objects < min_objects) throw SpecError("bad object count range");
    if (clutter < 0) throw SpecError("clutter count must be >= 0");
    if (theme_fidelity < 0.0 || theme_fidelity > 1.0) throw SpecError("theme fidelity must be in [0,1]");
    // largest canvas is 12 + 2 (size jitter); it must fit with a margin
    const int max_canvas = 14;
    if (image_size < max_canvas + 2) {
      throw SpecError("image size too small for the object geometry");
    }
  }

  nlohmann::json to_json() const {
    return {{"classes", classes},       {"train_scenes", train_scenes},
            {"val_scenes", val_scenes}, {"image_size", image_size},
            {"amplitude", amplitude},   {"min_objects", min_objects},
            {"max_objects", max_objects}, {"clutter", clutter},
            {"theme_fidelity", theme_fidelity}, {"seed", seed}};
  }

  static DatasetSpec from_json(const nlohmann::json& j) {
    DatasetSpec s;
    s.classes = j.at("classes").get<int>();
    s.train_scenes = j.at("train_scenes").get<int>();
    s.val_scenes = j.at("val_scenes").get<int>();
    s.image_size = j.at("image_size").get<int>();
    s.amplitude = j.at("amplitude").get<double>();
    s.min_objects = j.at("min_objects").get<int>();
    s.max_objects = j.at("max_objects").get<int>();
    s.clutter = j.value("clutter", 4);
    s.theme_fidelity = j.at("theme_fidelity").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
  }
};

struct SyntheticScene {
  Tensor image;                  // [1, S, S]
  std::vector<GtObject> objects;
  int theme = 0;
};

struct Dataset {
  DatasetSpec spec;
  int themes = 0;
  std::vector<std::string> class_names;
  std::vector<SyntheticScene> train;
  std::vector<SyntheticScene> val;
};

namespace detail {

struct PartSpec {
  enum Kind { kDisc, kHBar, kVBar } kind;
  double cy, cx;    // center on the base 12x12 canvas
  bool jitter_x;    // jitter axis for this class
};

inline std::vector<PartSpec> class_layout(int class_id) {
  const int base = class_id % 4;
  std::vector<PartSpec> parts;
  switch (base) {
    case 0:
      parts = {{PartSpec::kDisc, 3, 3, true}, {PartSpec::kDisc, 3, 8, true},
               {PartSpec::kHBar, 9, 5.5, true}};
      break;
    case 1:
      parts = {{PartSpec::kDisc, 3, 3, false}, {PartSpec::kDisc, 8, 3, false},
               {PartSpec::kVBar, 5.5, 9, false}};
      break;
    case 2:
      parts = {{PartSpec::kDisc, 8, 3, true}, {PartSpec::kDisc, 8, 8, true},
               {PartSpec::kHBar, 2, 5.5, true}};
      break;
    default:
      parts = {{PartSpec::kDisc, 3, 8, false}, {PartSpec::kDisc, 8, 8, false},
               {PartSpec::kVBar, 5.5, 2, false}};
      break;
  }
  if (class_id >= 4) {
    parts.push_back({PartSpec::kDisc, 5.5, 5.5, base % 2 == 0});
  }
  return parts;
}

inline void stamp_part(Tensor& canvas, PartSpec::Kind kind, int cy, int cx, double value) {
  const int h = static_cast<int>(canvas.dim(1)), w = static_cast<int>(canvas.dim(2));
  auto put = [&](int y, int x) {
    if (y >= 0 && y < h && x >= 0 && x < w) canvas.at(0, y, x) = value;
  };
  if (kind == PartSpec::kDisc) {
    for (int dy = -2; dy <= 2; ++dy) {
      for (int dx = -2; dx <= 2; ++dx) {
        if (dy * dy + dx * dx <= 4) put(cy + dy, cx + dx);
      }
    }
  } else if (kind == PartSpec::kHBar) {
    for (int dy = 0; dy <= 1; ++dy) {
      for (int dx = -3; dx <= 2; ++dx) put(cy + dy, cx + dx);
    }
  } else {
    for (int dy = -3; dy <= 2; ++dy) {
      for (int dx = 0; dx <= 1; ++dx) put(cy + dy, cx + dx);
    }
  }
}

// Object canvas: dark base plus bright parts, jittered along the class axis.
inline Tensor render_object(int class_id, int size, double amplitude, Rng& rng) {
  Tensor canvas({1, static_cast<std::size_t>(size), static_cast<std::size_t>(size)}, 0.05);
  const double scale = static_cast<double>(size) / 12.0;
  for (const PartSpec& part : class_layout(class_id)) {
    int cy = static_cast<int>(std::lround(part.cy * scale));
    int cx = static_cast<int>(std::lround(part.cx * scale));
    const int jitter = static_cast<int>(std::lround(rng.uniform(-amplitude, amplitude)));
    if (part.jitter_x) {
      cx += jitter;
    } else {
      cy += jitter;
    }
    cy = std::clamp(cy, 3, size - 4);
    cx = std::clamp(cx, 3, size - 4);
    stamp_part(canvas, part.kind, cy, cx, 0.95);
  }
  return canvas;
}

inline void paint_background(Tensor& image, int theme, Rng& rng) {
  static constexpr int kStripeDir[][2] = {{1, 0}, {0, 1}, {1, 1}, {2, 1}, {1, 2}, {2, 2}};
  const int a = kStripeDir[theme % 6][0], b = kStripeDir[theme % 6][1];
  const int s = static_cast<int>(image.dim(1));
  for (int i = 0; i < s; ++i) {
    for (int j = 0; j < s; ++j) {
      const int phase = (a * i + b * j) % 8;
      image.at(0, i, j) = 0.10 + 0.12 * (phase < 4 ? 1.0 : 0.0) + rng.uniform(0.0, 0.05);
    }
  }
}

}  // namespace detail

inline Dataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Dataset ds;
  ds.spec = spec;
  ds.themes = spec.classes;
  for (int k = 0; k < spec.classes; ++k) ds.class_names.push_back("class_" + std::to_string(k));

  // round-robin class assignment keeps the split balanced by construction
  int next_class = 0;
  auto make_scene = [&](SyntheticScene& scene) {
    const int s = spec.image_size;
    scene.image = Tensor({1, static_cast<std::size_t>(s), static_cast<std::size_t>(s)});
    const int count = spec.min_objects +
                      static_cast<int>(rng.uniform_int(
                          static_cast<std::uint64_t>(spec.max_objects - spec.min_objects + 1)));
    std::vector<std::pair<int, BoundingBox>> placed;
    for (int obj = 0; obj < count; ++obj) {
      const int cls = next_class;
      int size = 12;
      if (spec.amplitude > 0.0) {
        size += static_cast<int>(std::lround(rng.uniform(-1.0, 1.0) * std::min(spec.amplitude, 2.0)));
      }
      bool placed_ok = false;
      for (int attempt = 0; attempt < 200 && !placed_ok; ++attempt) {
        const int x = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(s - size + 1)));
        const int y = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(s - size + 1)));
        const BoundingBox box{x, y, size, size};
        // canvases overwrite the background, so instances must stay disjoint
        bool overlaps = false;
        for (const auto& [c, other] : placed) {
          if (iou(box, other) > 0.0) overlaps = true;
        }
        if (!overlaps) {
          placed.push_back({cls, box});
          placed_ok = true;
        }
      }
      if (placed_ok) next_class = (next_class + 1) % spec.classes;
    }

    const int first_class = placed.empty() ? -1 : placed[0].first;
    if (first_class >= 0 && rng.uniform() < spec.theme_fidelity) {
      scene.theme = first_class;
    } else {
      scene.theme = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(ds.themes)));
    }

    detail::paint_background(scene.image, scene.theme, rng);
    // part-like distractors; object canvases overwrite them, so ground-truth
    // crops stay clutter-free
    for (int blob = 0; blob < spec.clutter; ++blob) {
      const int by = 2 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(s - 4)));
      const int bx = 2 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(s - 4)));
      const int kind = static_cast<int>(rng.uniform_int(std::uint64_t{3}));
      const double value = rng.uniform(0.8, 0.95);
      detail::stamp_part(scene.image, static_cast<detail::PartSpec::Kind>(kind), by, bx, value);
    }
    for (const auto& [cls, box] : placed) {
      const Tensor canvas = detail::render_object(cls, box.w, spec.amplitude, rng);
      for (int i = 0; i < box.h; ++i) {
        for (int j = 0; j < box.w; ++j) {
          scene.image.at(0, box.y + i, box.x + j) = canvas.at(0, i, j);
        }
      }
      scene.objects.push_back({cls, box});
    }
  };

  ds.train.resize(spec.train_scenes);
  for (auto& scene : ds.train) make_scene(scene);
  ds.val.resize(spec.val_scenes);
  for (auto& scene : ds.val) make_scene(scene);
  return ds;
}

// First/second half of the validation split; components are trained on the
// first and selection/evaluation happens on the second.
inline std::pair<std::vector<SyntheticScene>, std::vector<SyntheticScene>> split_val(
    const Dataset& ds) {
  const std::size_t half = ds.val.size() / 2;
  std::vector<SyntheticScene> val1(ds.val.begin(), ds.val.begin() + half);
  std::vector<SyntheticScene> val2(ds.val.begin() + half, ds.val.end());
  return {std::move(val1), std::move(val2)};
}

inline std::vector<std::vector<GtObject>> ground_truth_of(const std::vector<SyntheticScene>& scenes) {
  std::vector<std::vector<GtObject>> gt;
  gt.reserve(scenes.size());
  for (const SyntheticScene& s : scenes) gt.push_back(s.objects);
  return gt;
}

// --- on-disk layout -----------------------------------------------------------
//
//   dir/manifest.json      spec, class names, theme count, split sizes
//   dir/annotations.json   per-scene boxes ([x,y,w,h]), class ids, theme id
//   dir/scenes/<split>_<index>.dpt

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "scenes");

  nlohmann::json manifest;
  manifest["format"] = "defnet-dataset-v1";
  manifest["spec"] = ds.spec.to_json();
  manifest["classes"] = ds.class_names;
  manifest["themes"] = ds.themes;
  manifest["splits"] = {{"train", ds.train.size()}, {"val", ds.val.size()}};
  {
    std::ofstream os(dir / "manifest.json");
    os << manifest.dump(2) << "\n";
  }

  nlohmann::json ann;
  auto dump_split = [&](const std::vector<SyntheticScene>& scenes, const std::string& name) {
    nlohmann::json arr = nlohmann::json::array();
    char file[64];
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      std::snprintf(file, sizeof file, "%s_%05zu.dpt", name.c_str(), i);
      save_tensor(scenes[i].image, dir / "scenes" / file);
      nlohmann::json objs = nlohmann::json::array();
      for (const GtObject& g : scenes[i].objects) {
        objs.push_back({{"class", g.class_id},
                        {"box", {g.box.x, g.box.y, g.box.w, g.box.h}}});
      }
      arr.push_back({{"scene", i}, {"theme", scenes[i].theme}, {"objects", std::move(objs)}});
    }
    ann[name] = std::move(arr);
  };
  dump_split(ds.train, "train");
  dump_split(ds.val, "val");
  std::ofstream os(dir / "annotations.json");
  os << ann.dump(2) << "\n";
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::ifstream mis(dir / "manifest.json");
  if (!mis) throw FormatError("missing dataset manifest: " + (dir / "manifest.json").string());
  nlohmann::json manifest = nlohmann::json::parse(mis);
  if (manifest.value("format", "") != "defnet-dataset-v1") {
    throw FormatError("unrecognized dataset format");
  }

  Dataset ds;
  ds.spec = DatasetSpec::from_json(manifest.at("spec"));
  ds.themes = manifest.at("themes").get<int>();
  ds.class_names = manifest.at("classes").get<std::vector<std::string>>();

  std::ifstream ais(dir / "annotations.json");
  if (!ais) throw FormatError("missing dataset annotations");
  nlohmann::json ann = nlohmann::json::parse(ais);

  auto load_split = [&](const std::string& name, std::vector<SyntheticScene>& out) {
    char file[64];
    const nlohmann::json& arr = ann.at(name);
    out.resize(arr.size());
    for (std::size_t i = 0; i < arr.size(); ++i) {
      std::snprintf(file, sizeof file, "%s_%05zu.dpt", name.c_str(), i);
      out[i].image = load_tensor(dir / "scenes" / file);
      out[i].theme = arr[i].at("theme").get<int>();
      for (const nlohmann::json& obj : arr[i].at("objects")) {
        const auto& b = obj.at("box");
        out[i].objects.push_back({obj.at("class").get<int>(),
                                  {b.at(0).get<int>(), b.at(1).get<int>(),
                                   b.at(2).get<int>(), b.at(3).get<int>()}});
      }
    }
  };
  load_split("train", ds.train);
  load_split("val", ds.val);
  return ds;
}

}  // namespace defnet
