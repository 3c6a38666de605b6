#pragma once

#include <json.hpp>

#include "fieldsynth/contrast.hpp"
#include "fieldsynth/forward_model.hpp"
#include "fieldsynth/phantom.hpp"
#include "fieldsynth/trainer.hpp"

// JSON views of the configuration structs. The readers apply only the keys
// that are present, so a partial document overrides defaults, and reject
// unknown keys with ArgumentError.
namespace fieldsynth::config {

using nlohmann::json;

json to_json(const PhantomSpec& spec);
void apply(const json& j, PhantomSpec& spec);

json to_json(const ForwardConfig& config);
void apply(const json& j, ForwardConfig& config);

json to_json(const SolverConfig& config);
void apply(const json& j, SolverConfig& config);

json to_json(const train::TrainConfig& config);
void apply(const json& j, train::TrainConfig& config);

json to_json(const DegradationVector& m);
// Accepts {"wm":..,"gm":..,"csf":..} or [wm, gm, csf].
DegradationVector degradation_from_json(const json& j);

json to_json(const ContrastTriple& c);
// Accepts {"wc":..,"wg":..,"gc":..} or [wc, wg, gc].
ContrastTriple contrast_from_json(const json& j);

}  // namespace fieldsynth::config
