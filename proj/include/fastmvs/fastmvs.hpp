#pragma once

#include "fastmvs/autodiff.hpp"
#include "fastmvs/camera.hpp"
#include "fastmvs/config.hpp"
#include "fastmvs/cost_volume.hpp"
#include "fastmvs/depth_map.hpp"
#include "fastmvs/error.hpp"
#include "fastmvs/feature_net.hpp"
#include "fastmvs/fusion.hpp"
#include "fastmvs/gauss_newton.hpp"
#include "fastmvs/gradcheck.hpp"
#include "fastmvs/io.hpp"
#include "fastmvs/optim.hpp"
#include "fastmvs/pipeline.hpp"
#include "fastmvs/propagation.hpp"
#include "fastmvs/scene.hpp"
#include "fastmvs/tensor.hpp"
