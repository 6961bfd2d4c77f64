#pragma once

// A model and corpus small enough to train for a handful of steps in a test.

#include <json.hpp>

#include "t2icount/config.hpp"

namespace testing {

inline nlohmann::json tiny_config() {
  nlohmann::json c = t2i::default_config();
  t2i::merge_config(c, {
      {"backbone", {{"latent_channels", 4}, {"text_dim", 8}, {"widths", {8, 8, 8, 8}}, {"attn_heads", 2}}},
      {"hscm", {{"embed_dim", 8}, {"heads", 2}}},
      {"counter", {{"attn_heads", 2}, {"hidden_channels", 8}}},
      {"train", {{"base_lr", 1e-3}, {"batch_size", 2}, {"epochs", 2}, {"log_every", 1}, {"seed", 3}, {"init_seed", 5}}},
      {"data", {{"augment", {{"crop", 64}, {"scale_min", 1.0}, {"scale_max", 1.25}}}}},
      {"synth", {{"image_size", 64}, {"train_images", 3}, {"val_images", 2}, {"test_images", 1},
                 {"majority", {3, 6}}, {"minority", {1, 1}}, {"object_radius", 3.0}, {"seed", 9}}},
      {"eval", {{"window", 64}}},
  });
  return c;
}

}  // namespace testing
