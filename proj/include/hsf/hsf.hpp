#pragma once

#include "hsf/detector.hpp"
#include "hsf/features.hpp"
#include "hsf/io.hpp"
#include "hsf/layer_analysis.hpp"
#include "hsf/mlp.hpp"
#include "hsf/synth_lm.hpp"
#include "hsf/trace.hpp"
