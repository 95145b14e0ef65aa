from pydantic import BaseModel, Field
from typing import List, Optional


class BoundaryValueRequest(BaseModel):
    z2: float = Field(..., example=0.0, description="Log of the account value in index units, ln X_N.")
    tau: float = Field(..., ge=0, example=1.0, description="Time to expiry.")
    sigma: float = Field(..., ge=0, example=0.2, description="Volatility of the traded asset.")
    strike: float = Field(1.0, example=1.0, description="Strike K of the account payoff (X_N - K)^+.")


class BoundaryValueResponse(BaseModel):
    value: float = Field(..., example=0.0796557, description="Closed-form value on the edge S_N = 2.")


class SymmetricPriceRequest(BaseModel):
    sigma: float = Field(0.2, ge=0, example=0.2)
    strike: float = Field(1.0, example=1.0)
    horizon: float = Field(1.0, gt=0, example=1.0)
    m0: float = Field(1.0, ge=0, lt=2, example=1.0, description="Initial M_N = M / N.")
    x0: float = Field(1.0, gt=0, example=1.0, description="Initial account value X_N.")
    space_step: float = Field(
        0.0433,
        gt=0,
        le=0.35,
        example=0.0433,
        description="Target spacing in ln S_N; rounded so that ln 2 is a whole number of cells."
    )


class SymmetricPriceResponse(BaseModel):
    value: float = Field(..., example=0.0871, description="PDE value of the symmetric passport at (m0, x0).")
    policy_agreement: float = Field(
        ...,
        ge=0,
        le=1,
        example=0.998,
        description="Share of nodes with positive Gamma where the computed policy is the stop-loss rule."
    )
    gamma_nodes: int = Field(..., ge=0, example=2400)
    cached: bool = Field(..., description="Whether the surface was reused from an earlier request.")
    processing_time: str = Field(..., example="3.21s")


class MarketSpec(BaseModel):
    sigma: List[float] = Field(..., min_length=1, example=[0.2, 0.3])
    rho: Optional[List[List[float]]] = Field(None, example=[[1.0, -0.9], [-0.9, 1.0]])
    spot: Optional[List[float]] = Field(None, example=[1.0, 1.0])


class BasketVolatilityRequest(BaseModel):
    market: MarketSpec
    s: List[float] = Field(..., min_length=1, example=[1.0, 1.0], description="Current prices.")
    delta: List[float] = Field(..., min_length=1, example=[1.0, -1.0], description="Controls in [-1, 1].")


class BasketVolatilityResponse(BaseModel):
    basket_volatility: float = Field(..., ge=0, example=0.4879)
    eigenvalues: List[float] = Field(..., description="Eigenvalues of the covariance matrix, descending.")
