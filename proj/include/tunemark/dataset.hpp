#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "tunemark/checkpoint.hpp"
#include "tunemark/common.hpp"
#include "tunemark/diffusion.hpp"
#include "tunemark/hash.hpp"
#include "tunemark/image_io.hpp"
#include "tunemark/rng.hpp"
#include "tunemark/tensor.hpp"

namespace tunemark {

// ---------------------------------------------------------------------------
// Vocabulary. Token ids are fixed so prompts are portable across runs:
//   0..9     structural words
//   10..39   30 object words
//   40..99   60 style words
//   100      reserved identifier token (personalization placeholder)
// ---------------------------------------------------------------------------

namespace vocab {
inline constexpr int kA = 0;
inline constexpr int kPainting = 1;
inline constexpr int kOf = 2;
inline constexpr int kIn = 3;
inline constexpr int kStyleWord = 4;
inline constexpr int kPhoto = 5;
inline constexpr int kObjectBase = 10;
inline constexpr int kObjectCount = 30;
inline constexpr int kStyleBase = 40;
inline constexpr int kStyleCount = 60;
inline constexpr int kIdentifier = 100;
inline constexpr int kSize = 101;

inline int object_token(int k) {
  require(k >= 0 && k < kObjectCount, "object index out of range");
  return kObjectBase + k;
}
inline int style_token(int j) {
  require(j >= 0 && j < kStyleCount, "style index out of range");
  return kStyleBase + j;
}
}  // namespace vocab

// Caption for training image i: "a painting of <object> in <identifier> style".
inline Prompt caption_prompt(int object_index) {
  return Prompt{{vocab::kA, vocab::kPainting, vocab::kOf, vocab::object_token(object_index),
                 vocab::kIn, vocab::kIdentifier, vocab::kStyleWord}};
}

// 60 style-focused prompts: "a painting of <object> in <style> style".
inline std::vector<Prompt> style_prompt_set() {
  std::vector<Prompt> out;
  out.reserve(vocab::kStyleCount);
  for (int j = 0; j < vocab::kStyleCount; ++j) {
    out.push_back(Prompt{{vocab::kA, vocab::kPainting, vocab::kOf,
                          vocab::object_token(j % vocab::kObjectCount), vocab::kIn,
                          vocab::style_token(j), vocab::kStyleWord}});
  }
  return out;
}

// 30 object-focused prompts: "a photo of <object>".
inline std::vector<Prompt> object_prompt_set() {
  std::vector<Prompt> out;
  out.reserve(vocab::kObjectCount);
  for (int k = 0; k < vocab::kObjectCount; ++k) {
    out.push_back(Prompt{{vocab::kA, vocab::kPhoto, vocab::kOf, vocab::object_token(k)}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic style dataset
// ---------------------------------------------------------------------------

struct StyleDataset {
  ImageBatch<float> data;
  std::vector<std::string> ids;     // stable per-image identifiers
  std::vector<std::string> splits;  // split assignment per image
  std::string caption_template = "a painting of <object> in <identifier> style";
  int vocab_size = vocab::kSize;
  int identifier_token = vocab::kIdentifier;
  int style_index = 0;
};

// Smooth procedural images sharing one palette (the "style"), with an
// object-dependent shape. Pixels stay inside [0.06, 0.94] so a small
// watermark is never clipped by the [0,1] range.
inline StyleDataset make_style_dataset(int n_images, std::array<int, 3> image_shape,
                                       int style_index, uint64_t seed) {
  require(n_images >= 1, "dataset needs at least one image");
  require(image_shape[0] == 3, "style dataset images are RGB");
  const int H = image_shape[1], W = image_shape[2];
  StyleDataset ds;
  ds.style_index = style_index;
  ds.data.pixels = Tensor<float>({n_images, 3, H, W});

  Rng palette_rng(mix_seed(seed, 0x9a1e77e, static_cast<uint64_t>(style_index)));
  double palette[3][3];
  for (auto& color : palette) {
    for (double& ch : color) ch = palette_rng.uniform(0.2, 0.8);
  }

  const double two_pi = 6.283185307179586;
  for (int i = 0; i < n_images; ++i) {
    Rng rng(mix_seed(seed, 0x57e11a, static_cast<uint64_t>(style_index), static_cast<uint64_t>(i)));
    const double fx1 = 1.0 + rng.randint(3), fy1 = 1.0 + rng.randint(3);
    const double fx2 = 1.0 + rng.randint(4), fy2 = 1.0 + rng.randint(4);
    const double p1 = rng.uniform(0.0, two_pi), p2 = rng.uniform(0.0, two_pi);
    const int object_index = i % vocab::kObjectCount;
    // object shape: a disc whose position is derived from the object word
    const double cx = (0.25 + 0.5 * ((object_index * 7) % 10) / 9.0) * W;
    const double cy = (0.25 + 0.5 * ((object_index * 3) % 10) / 9.0) * H;
    const double radius = 0.16 * std::min(H, W);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const double u = 0.5 + 0.5 * std::sin(two_pi * (fx1 * x / W + fy1 * y / H) + p1);
        const double v = 0.5 + 0.5 * std::sin(two_pi * (fx2 * x / W - fy2 * y / H) + p2);
        const bool inside = (x - cx) * (x - cx) + (y - cy) * (y - cy) <= radius * radius;
        for (int c = 0; c < 3; ++c) {
          double val = palette[0][c] * u + palette[1][c] * (1.0 - u) * v +
                       palette[2][c] * (1.0 - u) * (1.0 - v);
          if (inside) val = 0.7 * palette[(c + object_index) % 3][(c + 1) % 3] + 0.3 * val;
          // snap to the 8-bit grid so the stored floats equal their PNG
          // round-trip exactly (the interchange format is 8-bit)
          const float squeezed = static_cast<float>(0.06 + 0.88 * std::clamp(val, 0.0, 1.0));
          ds.data.pixels.at(i, c, y, x) = dequantize_u8(quantize_u8(squeezed));
        }
      }
    }
    ds.data.prompts.push_back(caption_prompt(object_index));
    char buf[16];
    std::snprintf(buf, sizeof(buf), "img_%04d", i);
    ds.ids.emplace_back(buf);
    ds.splits.emplace_back("train");
  }
  ds.data.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Dataset directory: one PNG per image plus dataset.json
// ---------------------------------------------------------------------------

inline void save_dataset(const std::filesystem::path& dir, const StyleDataset& ds) {
  std::filesystem::create_directories(dir);
  const int n = ds.data.count();
  require(static_cast<int>(ds.ids.size()) == n && static_cast<int>(ds.splits.size()) == n &&
              static_cast<int>(ds.data.prompts.size()) == n,
          "dataset fields must align with the image count");
  json manifest{{"format_version", kCheckpointFormatVersion},
                {"kind", "dataset"},
                {"resolution", {ds.data.pixels.dim(1), ds.data.pixels.dim(2), ds.data.pixels.dim(3)}},
                {"caption_template", ds.caption_template},
                {"vocab_size", ds.vocab_size},
                {"identifier_token", ds.identifier_token},
                {"style_index", ds.style_index}};
  manifest["images"] = json::array();
  for (int i = 0; i < n; ++i) {
    Tensor<float> img({ds.data.pixels.dim(1), ds.data.pixels.dim(2), ds.data.pixels.dim(3)});
    const long per = img.size();
    std::copy(ds.data.pixels.data() + static_cast<long>(i) * per,
              ds.data.pixels.data() + static_cast<long>(i + 1) * per, img.data());
    const std::string file = ds.ids[static_cast<size_t>(i)] + ".png";
    write_png((dir / file).string(), to_u8(img));
    manifest["images"].push_back({{"id", ds.ids[static_cast<size_t>(i)]},
                                  {"file", file},
                                  {"sha256", sha256_file((dir / file).string())},
                                  {"prompt", ds.data.prompts[static_cast<size_t>(i)].tokens},
                                  {"split", ds.splits[static_cast<size_t>(i)]}});
  }
  write_text_file(dir / "dataset.json", manifest.dump(2));
}

inline StyleDataset load_dataset(const std::filesystem::path& dir) {
  const json manifest = read_json_file(dir / "dataset.json");
  StyleDataset ds;
  try {
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw data_error("unsupported dataset manifest version");
    }
    if (manifest.at("kind").get<std::string>() != "dataset") {
      throw data_error("manifest is not a dataset manifest");
    }
    const std::vector<int> res = manifest.at("resolution").get<std::vector<int>>();
    require(res.size() == 3, "dataset resolution must be (C,H,W)");
    ds.caption_template = manifest.at("caption_template").get<std::string>();
    ds.vocab_size = manifest.at("vocab_size").get<int>();
    ds.identifier_token = manifest.at("identifier_token").get<int>();
    ds.style_index = manifest.at("style_index").get<int>();
    const json& images = manifest.at("images");
    const int n = static_cast<int>(images.size());
    require(n >= 1, "dataset manifest lists no images");
    ds.data.pixels = Tensor<float>({n, res[0], res[1], res[2]});
    const long per = static_cast<long>(res[0]) * res[1] * res[2];
    for (int i = 0; i < n; ++i) {
      const json& entry = images.at(static_cast<size_t>(i));
      const std::string file = entry.at("file").get<std::string>();
      const std::string path = (dir / file).string();
      if (sha256_file(path) != entry.at("sha256").get<std::string>()) {
        throw data_error("dataset image checksum mismatch: " + file);
      }
      const Tensor<float> img = to_float(read_png(path));
      if (img.dim(0) != res[0] || img.dim(1) != res[1] || img.dim(2) != res[2]) {
        throw data_error("dataset image resolution mismatch: " + file);
      }
      std::copy(img.data(), img.data() + per, ds.data.pixels.data() + static_cast<long>(i) * per);
      ds.ids.push_back(entry.at("id").get<std::string>());
      ds.splits.push_back(entry.at("split").get<std::string>());
      ds.data.prompts.push_back(Prompt{entry.at("prompt").get<std::vector<int>>()});
    }
  } catch (const json::exception& e) {
    throw data_error(std::string("dataset manifest: ") + e.what());
  }
  ds.data.validate();
  return ds;
}

}  // namespace tunemark
