#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "tunemark/blob.hpp"
#include "tunemark/common.hpp"
#include "tunemark/denoiser.hpp"
#include "tunemark/diffusion.hpp"
#include "tunemark/hash.hpp"
#include "tunemark/schedule.hpp"

namespace tunemark {

using json = nlohmann::json;

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot open for writing: " + path.string());
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw data_error("short write: " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot open for reading: " + path.string());
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return s;
}

inline json read_json_file(const std::filesystem::path& path) {
  json j = json::parse(read_text_file(path), nullptr, false);
  if (j.is_discarded()) throw data_error("malformed JSON: " + path.string());
  return j;
}

// ---------------------------------------------------------------------------
// Model checkpoints: one directory holding manifest.json plus one binary
// blob per named parameter. Round trips are bit-exact for float32 params.
// ---------------------------------------------------------------------------

constexpr int kCheckpointFormatVersion = 1;

inline std::string param_blob_filename(const std::string& param_name) {
  return param_name + ".bin";
}

template <typename T>
inline std::vector<Param<T>*> all_params(DiffusionModel<T>& model) {
  auto ps = model.denoiser().params();
  ps.push_back(&model.cond_embed());
  return ps;
}

inline void save_model(const std::filesystem::path& dir, DiffusionModel<float>& model) {
  const auto* unet = dynamic_cast<const CondUNet<float>*>(&model.denoiser());
  require(unet != nullptr, "only the production denoiser architecture can be checkpointed");
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["kind"] = "diffusion_model";
  manifest["arch"] = unet->arch_tag();
  manifest["width"] = unet->width();
  manifest["cond_dim"] = model.cond_dim();
  manifest["vocab_size"] = model.vocab_size();
  manifest["image_shape"] = model.image_shape();
  manifest["schedule"] = {{"timesteps", model.schedule().timesteps},
                          {"betas", model.schedule().betas}};
  if (unet->lora_attached()) {
    manifest["lora"] = {{"rank", unet->lora_rank()}, {"scale", unet->lora_scale()}};
  }
  json params = json::array();
  for (auto* p : all_params(model)) {
    const std::string file = param_blob_filename(p->name);
    write_blob(dir / file, p->value);
    params.push_back({{"name", p->name},
                      {"file", file},
                      {"shape", p->value.shape()},
                      {"sha256", sha256_file((dir / file).string())}});
  }
  manifest["params"] = params;
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline DiffusionModel<float> load_model(const std::filesystem::path& dir) {
  const json manifest = read_json_file(dir / "manifest.json");
  try {
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw data_error("unsupported checkpoint format version");
    }
    if (manifest.at("arch").get<std::string>() != "cond_unet_v1") {
      throw data_error("unknown denoiser architecture: " +
                       manifest.at("arch").get<std::string>());
    }
    const int width = manifest.at("width").get<int>();
    const int cond_dim = manifest.at("cond_dim").get<int>();
    const int vocab = manifest.at("vocab_size").get<int>();
    const auto shape = manifest.at("image_shape").get<std::array<int, 3>>();
    NoiseSchedule sched = NoiseSchedule::from_betas(
        manifest.at("schedule").at("betas").get<std::vector<double>>());
    if (sched.timesteps != manifest.at("schedule").at("timesteps").get<int>()) {
      throw data_error("schedule timestep count disagrees with betas length");
    }
    auto unet = std::make_unique<CondUNet<float>>(cond_dim, width, 0);
    if (manifest.contains("lora")) {
      unet->attach_lora(manifest.at("lora").at("rank").get<int>(),
                        manifest.at("lora").at("scale").get<double>(), 0);
    }
    DiffusionModel<float> model(std::move(unet), vocab, std::move(sched), shape, 0);
    auto params = all_params(model);
    size_t loaded = 0;
    for (const auto& entry : manifest.at("params")) {
      const std::string name = entry.at("name").get<std::string>();
      Param<float>* target = nullptr;
      for (auto* p : params) {
        if (p->name == name) {
          target = p;
          break;
        }
      }
      if (target == nullptr) throw data_error("checkpoint names unknown parameter: " + name);
      const std::string file = entry.at("file").get<std::string>();
      if (entry.contains("sha256") &&
          sha256_file((dir / file).string()) != entry.at("sha256").get<std::string>()) {
        throw data_error("parameter blob checksum mismatch: " + file);
      }
      Tensor<float> value = read_blob(dir / file);
      if (value.shape() != target->value.shape()) {
        throw data_error("parameter shape mismatch for " + name);
      }
      target->value = std::move(value);
      target->zero_grad();
      ++loaded;
    }
    if (loaded != params.size()) throw data_error("checkpoint does not cover all parameters");
    model.check_finite();
    return model;
  } catch (const json::exception& e) {
    throw data_error(std::string("bad checkpoint manifest: ") + e.what());
  }
}

}  // namespace tunemark
