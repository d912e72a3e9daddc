#pragma once

#include "aeromon/anomaly.hpp"
#include "aeromon/autoencoder.hpp"
#include "aeromon/baselines.hpp"
#include "aeromon/dataset.hpp"
#include "aeromon/error.hpp"
#include "aeromon/evaluation.hpp"
#include "aeromon/numerics.hpp"
#include "aeromon/pipeline.hpp"
