#pragma once

#include <json.hpp>
#include <string>

#include "textdet/common.hpp"

namespace textdet {

// Hyperparameters of the detector + segmenter. Serialized into checkpoints
// so inference can rebuild the exact architecture.
struct ModelConfig {
  int dim = 128;          // model width C
  int heads = 8;
  int enc_layers = 3;     // transformer encoder depth (0..6)
  int dec_layers = 3;
  int num_queries = 32;   // queries per granularity group
  int poly_points = 16;   // regressed polygon arity
  int para_classes = 5;   // paragraph vocabulary size
  int ffn_mult = 4;
  int in_channels = 1;
  std::string interaction = "1";  // "1" | "2" | "3" | "disabled" | "bottom_up"

  void validate() const {
    if (dim < 8 || dim % 4 != 0) throw validation_error("model: dim must be >= 8 and divisible by 4");
    if (heads < 1 || dim % heads != 0) throw validation_error("model: heads must divide dim");
    if (enc_layers < 0 || enc_layers > 6) throw validation_error("model: enc_layers must be 0..6");
    if (dec_layers < 1 || dec_layers > 6) throw validation_error("model: dec_layers must be 1..6");
    if (num_queries < 1) throw validation_error("model: num_queries must be >= 1");
    if (poly_points < 4 || poly_points % 2 != 0)
      throw validation_error("model: poly_points must be even and >= 4");
    if (para_classes < 1) throw validation_error("model: para_classes must be >= 1");
    if (ffn_mult < 1) throw validation_error("model: ffn_mult must be >= 1");
    if (in_channels != 1 && in_channels != 3)
      throw validation_error("model: in_channels must be 1 or 3");
    if (interaction != "1" && interaction != "2" && interaction != "3" &&
        interaction != "disabled" && interaction != "bottom_up")
      throw validation_error("model: interaction must be one of 1|2|3|disabled|bottom_up");
  }

  nlohmann::json to_json() const {
    return {{"dim", dim},
            {"heads", heads},
            {"enc_layers", enc_layers},
            {"dec_layers", dec_layers},
            {"num_queries", num_queries},
            {"poly_points", poly_points},
            {"para_classes", para_classes},
            {"ffn_mult", ffn_mult},
            {"in_channels", in_channels},
            {"interaction", interaction}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.dim = j.value("dim", c.dim);
    c.heads = j.value("heads", c.heads);
    c.enc_layers = j.value("enc_layers", c.enc_layers);
    c.dec_layers = j.value("dec_layers", c.dec_layers);
    c.num_queries = j.value("num_queries", c.num_queries);
    c.poly_points = j.value("poly_points", c.poly_points);
    c.para_classes = j.value("para_classes", c.para_classes);
    c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
    c.in_channels = j.value("in_channels", c.in_channels);
    c.interaction = j.value("interaction", c.interaction);
    c.validate();
    return c;
  }

  // vocabulary size of a granularity's classification head
  int vocab(int granularity) const { return granularity == 2 ? para_classes : 1; }
};

}  // namespace textdet
