#pragma once

// Umbrella header.

#include "lsnerf/adam.hpp"
#include "lsnerf/autoencoder.hpp"
#include "lsnerf/camera.hpp"
#include "lsnerf/field.hpp"
#include "lsnerf/geometry.hpp"
#include "lsnerf/gradcheck.hpp"
#include "lsnerf/image.hpp"
#include "lsnerf/metrics.hpp"
#include "lsnerf/ops.hpp"
#include "lsnerf/parallel.hpp"
#include "lsnerf/pipeline.hpp"
#include "lsnerf/renderer.hpp"
#include "lsnerf/rng.hpp"
#include "lsnerf/sceneio.hpp"
#include "lsnerf/tensor.hpp"
