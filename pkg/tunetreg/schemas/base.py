from pydantic import BaseModel, ConfigDict


class BaseSchema(BaseModel):
    model_config = ConfigDict(validate_assignment=True, populate_by_name=True)


class ArraySchema(BaseSchema):
    """Schema holding numpy arrays; arrays are validated, not coerced."""

    model_config = ConfigDict(
        validate_assignment=True,
        populate_by_name=True,
        arbitrary_types_allowed=True,
    )
