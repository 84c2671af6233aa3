#pragma once

#include "bqkit/common.hpp"
#include "bqkit/tensor_store.hpp"
#include "bqkit/data.hpp"
#include "bqkit/qat.hpp"
#include "bqkit/net.hpp"
#include "bqkit/models.hpp"
#include "bqkit/sensitivity.hpp"
#include "bqkit/binquant.hpp"
#include "bqkit/gwk.hpp"
#include "bqkit/codec.hpp"
