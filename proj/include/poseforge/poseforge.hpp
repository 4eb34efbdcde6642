#pragma once

#include "poseforge/core.hpp"
#include "poseforge/evalkit.hpp"
#include "poseforge/features.hpp"
#include "poseforge/geometry.hpp"
#include "poseforge/io.hpp"
#include "poseforge/kdtree.hpp"
#include "poseforge/matching.hpp"
#include "poseforge/parallel.hpp"
#include "poseforge/pipeline.hpp"
#include "poseforge/refinement.hpp"
#include "poseforge/registration.hpp"
#include "poseforge/rng.hpp"
