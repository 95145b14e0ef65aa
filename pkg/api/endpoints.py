import time

from api.schemas import (
    BasketVolatilityRequest, BasketVolatilityResponse, BoundaryValueRequest, BoundaryValueResponse,
    SymmetricPriceRequest, SymmetricPriceResponse,
)
from core.config import MarketSection
from core.errors import ArgumentError, ConfigurationError, NumericalError
from core.hjb_control import bs_boundary_value
from core.market_model import basket_volatility, eigen_factorize
from core.surface_cache import SymmetricSurfaceCache, get_surface_cache
from fastapi import APIRouter, Depends, HTTPException

router = APIRouter()


def raise_http(error: Exception):
    """Argument and configuration problems are the caller's (422); numerical failures are ours (500)."""
    if isinstance(error, (ArgumentError, ConfigurationError)):
        raise HTTPException(status_code=422, detail=str(error))
    raise HTTPException(status_code=500, detail=str(error))


@router.post(
    "/symmetric/boundary-value",
    response_model=BoundaryValueResponse,
    tags=["Symmetric passport"],
    summary="Closed-form value on the S_N = 2 edge"
)
async def symmetric_boundary_value(request: BoundaryValueRequest):
    try:
        value = bs_boundary_value(request.z2, request.tau, request.sigma, request.strike)
    except (ArgumentError, ConfigurationError, NumericalError) as e:
        raise_http(e)
    return BoundaryValueResponse(value=value)


@router.post(
    "/symmetric/price",
    response_model=SymmetricPriceResponse,
    tags=["Symmetric passport"],
    summary="Symmetric passport value from the HJB equation"
)
def symmetric_price(
    request: SymmetricPriceRequest,
    # Solved surfaces are shared across requests through the cached factory.
    cache: SymmetricSurfaceCache = Depends(get_surface_cache)
):
    """
    Solves (or reuses) the symmetric passport surface for the contract and
    interpolates it at (m0, x0). The solve is CPU-bound, so this endpoint is a
    plain function and runs in the threadpool.
    """
    start_time = time.time()
    try:
        quote = cache.quote(request.sigma, request.strike, request.horizon, request.m0, request.x0,
                            request.space_step)
    except (ArgumentError, ConfigurationError, NumericalError) as e:
        raise_http(e)

    return SymmetricPriceResponse(
        value=quote.value,
        policy_agreement=quote.policy_agreement,
        gamma_nodes=quote.gamma_nodes,
        cached=quote.cached,
        processing_time=f"{time.time() - start_time:.2f}s"
    )


@router.post(
    "/passport/basket-volatility",
    response_model=BasketVolatilityResponse,
    tags=["Classical passport"],
    summary="Volatility of the traded basket under a control"
)
async def passport_basket_volatility(request: BasketVolatilityRequest):
    try:
        model = MarketSection(**request.market.model_dump()).to_model()
        vol = basket_volatility(model, request.s, request.delta)
        factorization = eigen_factorize(model)
    except (ArgumentError, ConfigurationError, NumericalError) as e:
        raise_http(e)
    return BasketVolatilityResponse(basket_volatility=vol, eigenvalues=factorization.Lambda.tolist())
