#include "taxonomy.hpp"

namespace ufa::detail {

const std::vector<DomainTemplate>& domain_templates() {
  static const std::vector<DomainTemplate> kDomains = {
      {"food delivery", {"pizza", "noodles", "burger", "fried rice", "dumplings"}},
      {"hotel booking", {"room", "suite", "hotel stay", "double room"}},
      {"movie tickets", {"movie ticket", "cinema seat", "film pass"}},
      {"ride hailing", {"ride", "taxi trip", "car ride"}},
      {"flower delivery", {"bouquet", "roses", "flower basket"}},
      {"grocery", {"vegetables", "fruit box", "milk", "eggs"}},
      {"pharmacy", {"medicine", "cold pills", "vitamins"}},
      {"bike rental", {"bike", "scooter", "electric bike"}},
      {"train tickets", {"train ticket", "rail pass", "sleeper berth"}},
      {"flight booking", {"flight", "plane ticket", "boarding pass"}},
      {"beauty salon", {"haircut", "manicure", "facial"}},
      {"fitness", {"gym membership", "yoga class", "fitness pass"}},
      {"pet care", {"pet grooming", "dog food", "cat litter"}},
      {"home cleaning", {"cleaning service", "carpet cleaning", "window cleaning"}},
      {"car wash", {"car wash", "wax service", "interior cleaning"}},
      {"bakery", {"cake", "bread", "cookies"}},
      {"coffee", {"coffee", "latte", "tea"}},
      {"electronics", {"phone charger", "headphones", "power bank"}},
      {"clothing", {"jacket", "shoes", "shirt"}},
      {"books", {"novel", "textbook", "magazine"}},
      {"karaoke", {"karaoke room", "singing booth", "party room"}},
      {"parking", {"parking spot", "garage pass", "parking ticket"}},
      {"laundry", {"laundry service", "dry cleaning", "ironing"}},
      {"travel tours", {"city tour", "tour package", "museum pass"}},
  };
  return kDomains;
}

const std::vector<IntentTemplate>& intent_templates() {
  static const std::vector<IntentTemplate> kIntents = {
      {"refund request",
       {"i want a refund for my {item}", "please give me my money back for the {item}",
        "can i get a refund for the {item}", "i need to return the {item} and get a refund"},
       {"i have issued a refund for your {item}", "the refund for the {item} has been processed"},
       {"how long does the refund take", "will i get the full amount"},
       {"the money will be back in three days", "yes you will get the full amount"},
       "asked for a refund",
       "issued the refund"},
      {"refund status",
       {"where is my refund for the {item}", "i have not received the refund for my {item}",
        "when will the refund for the {item} arrive", "my refund for the {item} is missing"},
       {"your refund for the {item} will arrive in three days",
        "the refund for the {item} is on the way to your card"},
       {"can you make it faster", "which card will get the money"},
       {"i have marked it as urgent", "the money goes back to the card you paid with"},
       "asked about the refund status",
       "said the refund is on the way"},
      {"cancel order",
       {"i want to cancel my {item} order", "please cancel the {item}",
        "cancel the order for the {item} please", "i do not want the {item} anymore"},
       {"your {item} order has been cancelled", "i cancelled the order for the {item}"},
       {"is there a cancellation fee", "will i get a confirmation"},
       {"there is no fee for this cancellation", "you will get a message shortly"},
       "asked to cancel the order",
       "cancelled the order"},
      {"change order",
       {"i want to change my {item} order", "can i modify the {item} order",
        "please update the order for the {item}", "i need a different size for the {item}"},
       {"i have updated your {item} order", "the change to the {item} order is saved"},
       {"will the price change", "is the new order confirmed"},
       {"the price stays the same", "yes the new order is confirmed"},
       "asked to change the order",
       "updated the order"},
      {"order status",
       {"where is my {item}", "what is the status of my {item} order",
        "has my {item} been shipped", "can you track my {item}"},
       {"your {item} is on the way", "the {item} has been shipped and arrives today"},
       {"can i see the tracking", "what time will it arrive"},
       {"the tracking is in your app", "it should arrive within the hour"},
       "asked about the order status",
       "said the order is on the way"},
      {"delivery delay",
       {"my {item} is very late", "the {item} still has not arrived after two hours",
        "why is the {item} delayed", "the {item} is taking forever"},
       {"sorry the {item} is delayed and i added a voucher",
        "i have asked the courier to hurry with your {item}"},
       {"can you give me compensation", "how much longer will it be"},
       {"i added a voucher to your account", "about twenty more minutes"},
       "complained about a delay",
       "apologized and sent a voucher"},
      {"wrong item",
       {"i received the wrong {item}", "this is not the {item} i ordered",
        "you sent me a different {item}", "the {item} in the bag is not mine"},
       {"we will send the correct {item} right away", "sorry we will replace the {item}"},
       {"do i need to return the wrong one", "when will the right one come"},
       {"you can keep the wrong one", "the right one will come tomorrow"},
       "received the wrong item",
       "arranged a replacement"},
      {"quality complaint",
       {"the {item} was bad quality", "i am not happy with the quality of the {item}",
        "the {item} is broken", "the {item} was not fresh"},
       {"sorry about the {item} we will compensate you",
        "i have reported the {item} to the quality team"},
       {"will this happen again", "can i get a discount next time"},
       {"we will check the shop", "yes i added a discount for next time"},
       "complained about quality",
       "offered compensation"},
      {"payment failure",
       {"my payment for the {item} failed", "i could not pay for the {item}",
        "the payment page for the {item} shows an error", "my card was declined for the {item}"},
       {"please try paying for the {item} again now", "the payment issue for the {item} is fixed"},
       {"was i charged anyway", "can i use another card"},
       {"no you were not charged", "yes any card will work"},
       "reported a failed payment",
       "fixed the payment"},
      {"double charge",
       {"i was charged twice for the {item}", "there are two charges for my {item}",
        "you billed me two times for the {item}", "the {item} was paid twice"},
       {"the extra charge for the {item} will be returned",
        "i removed the duplicate charge for the {item}"},
       {"when will the extra money come back", "can you check my other orders"},
       {"within five days", "your other orders look fine"},
       "reported a double charge",
       "returned the extra charge"},
      {"coupon issue",
       {"my coupon does not work for the {item}", "the discount was not applied to the {item}",
        "how do i use a coupon for the {item}", "the voucher failed on the {item}"},
       {"i applied the coupon to your {item}", "the discount for the {item} is now active"},
       {"does the coupon expire", "can i use two coupons"},
       {"it expires at the end of the month", "only one coupon per order"},
       "had a coupon problem",
       "applied the coupon"},
      {"invoice request",
       {"i need an invoice for the {item}", "please send me a receipt for the {item}",
        "can you issue an invoice for my {item}", "i want a tax receipt for the {item}"},
       {"the invoice for the {item} is sent to your email",
        "i issued the receipt for your {item}"},
       {"can you add my company name", "when will i get it"},
       {"yes i added the company name", "it is already in your inbox"},
       "asked for an invoice",
       "sent the invoice"},
      {"change address",
       {"i need to change the address for my {item}", "please send the {item} to a new address",
        "can i update the delivery address of the {item}", "the address for the {item} is wrong"},
       {"the address for your {item} is updated", "i changed where the {item} will be delivered"},
       {"will it still arrive today", "does the courier know"},
       {"yes it will still arrive today", "the courier has the new address"},
       "asked to change the address",
       "updated the address"},
      {"account login",
       {"i can not log in to buy the {item}", "my account is locked so i can not order the {item}",
        "i forgot my password while ordering the {item}", "the app logs me out when i buy the {item}"},
       {"i reset your account so you can order the {item}",
        "your account is unlocked and the {item} is in your cart"},
       {"do i need a new password", "is my account safe"},
       {"yes please set a new password", "your account is safe"},
       "could not log in",
       "unlocked the account"},
      {"membership question",
       {"is there a member discount on the {item}", "how do members get the {item} cheaper",
        "does my membership cover the {item}", "can i join the membership for the {item}"},
       {"members save ten percent on the {item}", "your membership covers the {item}"},
       {"how much is the membership", "can i cancel the membership later"},
       {"it costs five dollars a month", "yes you can cancel at any time"},
       "asked about membership",
       "explained the membership"},
      {"price inquiry",
       {"how much is the {item}", "what is the price of the {item}", "is the {item} expensive",
        "why did the price of the {item} go up"},
       {"the {item} costs twenty dollars today", "the price of the {item} is shown in the app"},
       {"is there a cheaper option", "does the price include tax"},
       {"there is a smaller option", "yes the price includes tax"},
       "asked about the price",
       "explained the price"},
      {"booking time",
       {"can i book the {item} for tomorrow", "i want to reserve the {item} for friday",
        "is the {item} available this weekend", "i need the {item} at six in the evening"},
       {"the {item} is booked for your chosen time", "i reserved the {item} for you"},
       {"can i change the time later", "will i get a reminder"},
       {"yes you can change it in the app", "we will remind you one hour before"},
       "asked to book a time",
       "made the booking"},
      {"contact merchant",
       {"i need to talk to the shop about the {item}", "how can i contact the seller of the {item}",
        "please connect me to the merchant for the {item}", "the shop for the {item} does not answer"},
       {"i sent your message about the {item} to the shop",
        "the merchant for the {item} will call you soon"},
       {"how soon will they call", "can i get their number"},
       {"within ten minutes", "the number is on the order page"},
       "wanted to contact the merchant",
       "connected the merchant"},
      {"rider complaint",
       {"the courier was rude when delivering the {item}", "the driver threw my {item} at the door",
        "the delivery person for my {item} was impolite", "the rider left the {item} outside"},
       {"sorry i reported the courier who delivered the {item}",
        "we will warn the rider who brought your {item}"},
       {"will he be punished", "can i rate the rider"},
       {"the rider will be reviewed", "yes you can rate him in the app"},
       "complained about the courier",
       "reported the courier"},
      {"praise feedback",
       {"i really liked the {item}", "the {item} was excellent thank you",
        "great service for the {item}", "the {item} was perfect"},
       {"thank you for the kind words about the {item}", "we are glad you enjoyed the {item}"},
       {"can you tell the shop", "will you keep this quality"},
       {"i will pass it to the shop", "we will keep it up"},
       "praised the service",
       "thanked the customer"},
  };
  return kIntents;
}

const std::vector<std::vector<std::string>>& intent_cues() {
  static const std::vector<std::vector<std::string>> kCues = {
      // refund request
      {"money back", "reimbursement", "repayment", "payback", "cash return", "reversal of the payment",
       "compensation", "return and reimburse", "get my cash back", "chargeback"},
      // refund status
      {"refund eta", "refund tracking", "money still not back", "refund progress", "refund still pending",
       "refund not arrived", "refund timeline", "refund delay", "waiting on the refund", "refund update"},
      // cancel order
      {"order cancellation", "call off the purchase", "scrap the order", "drop the purchase",
       "abort the order", "void the order", "undo my purchase", "stop the order", "kill the order",
       "withdraw the order"},
      // change order
      {"order modification", "swap the size", "edit my purchase", "add one more to the order",
       "update the quantity", "switch the flavor", "alter the order", "amend the purchase",
       "replace an option", "adjust the order"},
      // order status
      {"order tracking", "shipment progress", "where my parcel is", "tracking number", "order progress",
       "dispatch status", "shipping update", "parcel location", "order eta", "package whereabouts"},
      // delivery delay
      {"late delivery", "overdue package", "delivery is slow", "waiting for hours", "still not delivered",
       "courier running late", "past the promised time", "delayed shipment", "taking forever to arrive",
       "missed delivery window"},
      // wrong item
      {"wrong product", "mixed up order", "not what i ordered", "received another person order",
       "incorrect item", "wrong flavor sent", "wrong size sent", "swapped package",
       "different product arrived", "mistaken item"},
      // quality complaint
      {"poor quality", "broken on arrival", "stale product", "damaged goods", "bad taste", "cheap material",
       "defective unit", "spoiled product", "cracked packaging", "faulty item"},
      // payment failure
      {"payment declined", "card rejected", "checkout error", "transaction failed", "cannot pay",
       "payment not going through", "pay button broken", "bank declined", "payment page crashed",
       "wallet payment error"},
      // double charge
      {"charged twice", "duplicate charge", "billed two times", "double billing", "two identical charges",
       "extra charge on my card", "repeated deduction", "paid twice by mistake", "duplicate transaction",
       "overbilled"},
      // coupon issue
      {"voucher not working", "promo code rejected", "discount code invalid", "coupon expired early",
       "voucher missing", "promo not applied", "discount not showing", "gift code error",
       "coupon cannot be used", "voucher balance gone"},
      // invoice request
      {"tax receipt", "billing statement", "official receipt", "vat invoice", "proof of purchase",
       "company invoice", "receipt copy", "printed invoice", "fapiao", "itemized bill"},
      // change address
      {"new delivery address", "wrong street on file", "update shipping location", "moved house",
       "different drop off point", "fix the address", "redirect the parcel", "change the destination",
       "new apartment number", "send it somewhere else"},
      // account login
      {"locked out", "password reset", "cannot sign in", "verification code not received",
       "forgot my password", "login error", "account frozen", "two factor problem", "sign in failure",
       "username not recognized"},
      // membership question
      {"vip plan", "loyalty program", "member perks", "premium subscription", "member points",
       "membership tiers", "annual plan benefits", "club card", "subscription renewal", "member only deals"},
      // price inquiry
      {"cost details", "price list", "how expensive", "fee breakdown", "rates today", "pricing info",
       "total cost", "price quote", "cheapest rate", "cost per unit"},
      // booking time
      {"reservation slot", "appointment time", "schedule a visit", "time slot", "book for later",
       "reserve a table", "pick a date", "earliest opening", "set an appointment", "available hours"},
      // contact merchant
      {"seller phone number", "talk to the store", "shop contact", "merchant hotline", "reach the vendor",
       "store manager", "message the seller", "call the shop", "vendor email", "speak with the owner"},
      // rider complaint
      {"rude courier", "careless driver", "impolite rider", "courier attitude", "driver yelled",
       "rider threw it", "courier was late and rude", "delivery guy was mean", "driver ignored me",
       "bad courier behaviour"},
      // praise feedback
      {"great job", "wonderful service", "five stars", "amazing experience", "very happy", "top quality",
       "big thanks", "lovely staff", "excellent work", "best service ever"},
  };
  return kCues;
}

const std::vector<std::string>& cue_frames() {
  static const std::vector<std::string> kFrames = {
      "{cue} for the {item}", "about the {item} {cue}", "{cue} regarding my {item}", "my {item} {cue}",
      "it is the {item} {cue}", "the {item} and {cue}", "quick question {cue} {item}", "{item} {cue} help"};
  return kFrames;
}

}  // namespace ufa::detail
