use serde::{Deserialize, Serialize};

use super::types::{Commission, Money};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "disposition", content = "amount", rename_all = "snake_case")]
pub enum DepositDisposition {
    None,
    ReturnedToSeller(Money),
    ForfeitedToBuyer(Money),
}

/// Distribution of a trade's escrows at close.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payouts {
    pub to_mediator: Money,
    pub to_seller: Money,
    pub refund_to_buyer: Money,
    pub deposit: DepositDisposition,
}

impl Payouts {
    /// Sum of what leaves the buyer's escrow.
    pub fn buyer_escrow_outflow(&self) -> u128 {
        self.to_mediator.0 as u128 + self.to_seller.0 as u128 + self.refund_to_buyer.0 as u128
    }
}

/// Settlement split for executed price `p`:
/// mediator `floor(c_S p/10^4) + floor(c_B p/10^4)`, seller `p - floor(c_S p/10^4)`.
/// The two always sum to the buyer's escrow `p + floor(c_B p/10^4)`.
pub fn compute_payouts(
    price: Money,
    seller_commission: Commission,
    buyer_commission: Commission,
) -> Payouts {
    let seller_fee = seller_commission.of(price);
    let buyer_fee = buyer_commission.of(price);
    Payouts {
        to_mediator: Money(seller_fee.0 + buyer_fee.0),
        to_seller: Money(price.0 - seller_fee.0),
        refund_to_buyer: Money::ZERO,
        deposit: DepositDisposition::None,
    }
}
