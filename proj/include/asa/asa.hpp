#pragma once

#include "asa/tensor.hpp"
#include "asa/ops.hpp"
#include "asa/rng.hpp"
#include "asa/optim.hpp"
#include "asa/volume.hpp"
#include "asa/patching.hpp"
#include "asa/informativeness.hpp"
#include "asa/position_encoding.hpp"
#include "asa/layers.hpp"
#include "asa/attention.hpp"
#include "asa/asa_model.hpp"
#include "asa/segmentation.hpp"
#include "asa/config.hpp"
#include "asa/checkpoint.hpp"
#include "asa/pipeline.hpp"
#include "asa/gradcheck.hpp"
