#pragma once

#include <json.hpp>

#include "trimkit/distill.hpp"
#include "trimkit/importance.hpp"
#include "trimkit/model.hpp"

namespace trimkit::inline TRIMKIT_NS {

using Json = nlohmann::ordered_json;

/// Invalid structured-text input; `field` is a JSON-pointer-like path.
struct FormatError : std::invalid_argument {
  FormatError(std::string field, const std::string& what)
      : std::invalid_argument(field + ": " + what), field(std::move(field)) {}
  std::string field;
};

Json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const Json& j);

Json to_json(const DistillConfig& c);
DistillConfig distill_config_from_json(const Json& j);

Json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const Json& j);

Json to_json(const AggregationSpec& s);
AggregationSpec aggregation_from_json(const Json& j);

/// Scores, per-axis rankings, aggregation spec and calibration checksum.
Json to_json(const ImportanceReport& r);
ImportanceReport importance_report_from_json(const Json& j);

Json to_json(const StepMetrics& m);

Json parse_json(const std::string& text, const std::string& what);

}  // namespace trimkit
