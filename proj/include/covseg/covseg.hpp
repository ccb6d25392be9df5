#pragma once

#include "covseg/error.hpp"
#include "covseg/geometry.hpp"
#include "covseg/image.hpp"
#include "covseg/nifti.hpp"
#include "covseg/resample.hpp"
#include "covseg/distance.hpp"
#include "covseg/mesh.hpp"
#include "covseg/components.hpp"
#include "covseg/levelset.hpp"
#include "covseg/shape_model.hpp"
#include "covseg/editing.hpp"
#include "covseg/metrics.hpp"
#include "covseg/phantom.hpp"
#include "covseg/pipeline.hpp"
