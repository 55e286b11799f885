#pragma once

// One root configuration for every stage. All stage randomness derives from
// the single root seed through stage-name hashing (derive_seed), so a run is
// reproducible from one knob. The canonical key=value echo goes verbatim
// into the header of every text artifact.

#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "eemb/datagen.hpp"
#include "eemb/encoder.hpp"
#include "eemb/healing.hpp"
#include "eemb/predictor.hpp"
#include "eemb/store.hpp"

namespace eemb {

struct RunConfig {
  std::uint64_t seed = 42;

  // encoder
  std::size_t num_layers = 12;
  std::size_t d_model = 64;
  std::size_t unified_dim = 32;
  std::size_t input_dim = 24;
  std::size_t lora_rank = 4;
  double lora_alpha = 8.0;
  double init_gain = 1.5;

  // corpus
  std::size_t n_items = 400;
  std::size_t d_latent = 8;
  double noise_low = 0.0;
  double noise_high = 0.8;

  // predictor
  std::size_t n_superficial = 3;
  std::size_t predictor_hidden = 48;
  std::size_t predictor_epochs = 500;
  double predictor_lr = 0.1;

  // healing
  double heal_lr = 0.01;
  std::size_t heal_epochs = 50;
  std::size_t heal_min_pool = 8;

  // embedding pipeline
  std::size_t max_batch = 32;
  bool pipeline_on = true;
  double inject_load_ms = 0.0;
  double inject_compute_ms = 0.0;
  bool memcap_int4 = false;

  // retrieval
  std::size_t k1 = 10;
  std::size_t k2 = 10;

  // store
  std::string cache_mode = "int4";      // int4 | lossless
  std::string embed_precision = "f32";  // f32 | int4

  void validate() const {
    if (num_layers < 2) throw std::invalid_argument("config: num_layers must be >= 2");
    if (unified_dim > d_model) throw std::invalid_argument("config: unified_dim > d_model");
    if (n_superficial < 1 || n_superficial >= num_layers)
      throw std::invalid_argument("config: n_superficial must be in [1, num_layers)");
    if (n_items < 1) throw std::invalid_argument("config: n_items must be >= 1");
    if (noise_low < 0.0 || noise_high < noise_low)
      throw std::invalid_argument("config: need 0 <= noise_low <= noise_high");
    if (k1 < 1 || k2 < 1) throw std::invalid_argument("config: k1 and k2 must be >= 1");
    if (max_batch < 1) throw std::invalid_argument("config: max_batch must be >= 1");
    if (cache_mode != "int4" && cache_mode != "lossless")
      throw std::invalid_argument("config: cache_mode must be int4 or lossless");
    if (embed_precision != "f32" && embed_precision != "int4")
      throw std::invalid_argument("config: embed_precision must be f32 or int4");
    if (inject_load_ms < 0.0 || inject_compute_ms < 0.0)
      throw std::invalid_argument("config: injected costs must be non-negative");
  }

  EncoderConfig encoder_config() const {
    EncoderConfig cfg;
    cfg.num_layers = num_layers;
    cfg.d_model = d_model;
    cfg.unified_dim = unified_dim;
    cfg.input_dim = input_dim;
    cfg.modalities = {"A", "B"};
    cfg.seed = derive_seed(seed, "encoder");
    cfg.lora_rank = lora_rank;
    cfg.lora_alpha = static_cast<float>(lora_alpha);
    cfg.init_gain = static_cast<float>(init_gain);
    return cfg;
  }

  DatagenConfig datagen_config() const {
    DatagenConfig cfg;
    cfg.n = n_items;
    cfg.d_latent = d_latent;
    cfg.input_dim = input_dim;
    cfg.noise_low = static_cast<float>(noise_low);
    cfg.noise_high = static_cast<float>(noise_high);
    cfg.seed = derive_seed(seed, "datagen");
    return cfg;
  }

  PredictorTrainConfig predictor_config() const {
    PredictorTrainConfig cfg;
    cfg.hidden = predictor_hidden;
    cfg.epochs = predictor_epochs;
    cfg.learning_rate = static_cast<float>(predictor_lr);
    cfg.seed = derive_seed(seed, "predictor");
    return cfg;
  }

  HealConfig heal_config(const std::string& modality) const {
    HealConfig cfg;
    cfg.modality = modality;
    cfg.learning_rate = static_cast<float>(heal_lr);
    cfg.epochs_per_exit = heal_epochs;
    cfg.min_pool = heal_min_pool;
    return cfg;
  }

  Store make_store() const {
    return Store(unified_dim, d_model, num_layers,
                 cache_mode == "int4" ? Store::CacheMode::int4 : Store::CacheMode::lossless,
                 embed_precision == "f32" ? Store::EmbedPrecision::f32
                                          : Store::EmbedPrecision::int4);
  }

  std::map<std::string, std::string> to_map() const {
    std::map<std::string, std::string> m;
    auto put = [&](const std::string& k, auto v) {
      std::ostringstream ss;
      ss << v;
      m[k] = ss.str();
    };
    put("seed", seed);
    put("num_layers", num_layers);
    put("d_model", d_model);
    put("unified_dim", unified_dim);
    put("input_dim", input_dim);
    put("lora_rank", lora_rank);
    put("lora_alpha", lora_alpha);
    put("init_gain", init_gain);
    put("n_items", n_items);
    put("d_latent", d_latent);
    put("noise_low", noise_low);
    put("noise_high", noise_high);
    put("n_superficial", n_superficial);
    put("predictor_hidden", predictor_hidden);
    put("predictor_epochs", predictor_epochs);
    put("predictor_lr", predictor_lr);
    put("heal_lr", heal_lr);
    put("heal_epochs", heal_epochs);
    put("heal_min_pool", heal_min_pool);
    put("max_batch", max_batch);
    put("pipeline_on", pipeline_on ? 1 : 0);
    put("inject_load_ms", inject_load_ms);
    put("inject_compute_ms", inject_compute_ms);
    put("memcap_int4", memcap_int4 ? 1 : 0);
    put("k1", k1);
    put("k2", k2);
    m["cache_mode"] = cache_mode;
    m["embed_precision"] = embed_precision;
    return m;
  }

  // canonical echo line: "config: k=v k=v ..." in key order
  std::string echo() const {
    std::ostringstream ss;
    ss << "config:";
    for (const auto& [k, v] : to_map()) ss << " " << k << "=" << v;
    return ss.str();
  }
};

}  // namespace eemb
