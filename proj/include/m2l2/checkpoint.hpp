#pragma once

#include <memory>
#include <string>

#include "m2l2/training.hpp"

// Checkpoint file format: magic "M2L2CKPT", version u16, u64 manifest
// length, JSON manifest (config, iteration, tensor directory with name ->
// dtype/shape/byte offset), then all tensors as little-endian f32 — raw and
// EMA parameter sets plus optimizer moments, so training resumes exactly.
namespace m2l2 {

void save_checkpoint(const std::string& path, const TrainState<float>& st);

// Rebuilds the model from the stored config and restores every tensor
// bit-exactly, along with the iteration counter.
std::unique_ptr<TrainState<float>> load_checkpoint(const std::string& path);

}  // namespace m2l2
