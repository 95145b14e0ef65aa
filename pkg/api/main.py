from api import endpoints
from fastapi import FastAPI

# Create the main FastAPI application instance.
app = FastAPI(
    title="Passport Lab API",
    description="Closed-form boundary values, symmetric passport pricing and basket volatilities.",
    version="1.0.0"
)

app.include_router(endpoints.router)


@app.get("/health", tags=["Status"])
async def health_check():
    """
    Lightweight liveness check. It never touches the solvers, so it stays fast
    while a long pricing request is being served.
    """
    return {"status": "ok"}
